//! Multi-orientation self-ensembled MS lesion segmentation.
//!
//! A small 2.5D encoder-decoder is run over 24 plane/rotation/flip views of
//! a multicontrast volume; the per-view binary masks are summed into a
//! confidence map and fused by two-threshold lesion detection and
//! 26-connected growth. Normalization layers can be switched to per-input
//! statistics at test time to absorb domain shift.

pub mod components;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod orient;
pub mod phantom;
pub mod pipeline;
pub mod tinynet;
pub mod volio;

pub use error::{Error, Result};
pub use fusion::FusionParams;
pub use metrics::MetricsReport;
pub use orient::{Dihedral, OrientTransform, Plane, Slab25D};
pub use tinynet::{InferenceStats, Net, NetConfig, NormMode, TrainConfig};
pub use volio::{
    Availability, BinaryMask3D, ConfidenceMap, Contrast, Dims, Grid3, MultiContrastVolume, Volume3D,
};
