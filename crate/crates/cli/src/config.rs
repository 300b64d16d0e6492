//! Per-command JSON configurations. Flags override file values; unknown
//! keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use msseg_core::phantom::{CorruptionSpec, PhantomConfig};
use msseg_core::{FusionParams, InferenceStats, NetConfig, NormMode, OrientTransform, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))
        }
    }
}

pub fn required(p: &Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    p.clone().ok_or_else(|| CliError::usage(format!("missing {what}")))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomCmd {
    pub out: Option<PathBuf>,
    pub phantom: PhantomConfig,
    /// Applied in order to every subject.
    pub corruptions: Vec<CorruptionSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainCmd {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub norm: NormMode,
    pub inference_stats: InferenceStats,
    pub eps: f64,
    pub momentum: f64,
    pub net: NetConfig,
    pub train: TrainConfig,
}

impl Default for TrainCmd {
    fn default() -> Self {
        Self {
            data: None,
            out: None,
            resume: None,
            norm: NormMode::CondIn,
            inference_stats: InferenceStats::InstanceStats,
            eps: 1e-5,
            momentum: 0.1,
            net: NetConfig::desk(),
            train: TrainConfig::default(),
        }
    }
}

/// Which views vote into the confidence map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
pub enum TransformSet {
    #[default]
    #[serde(rename = "all24")]
    #[value(name = "all24")]
    All24,
    #[serde(rename = "identity")]
    #[value(name = "identity")]
    Identity,
    #[serde(rename = "3plane")]
    #[value(name = "3plane")]
    ThreePlane,
}

impl TransformSet {
    pub fn transforms(self) -> Vec<OrientTransform> {
        match self {
            TransformSet::All24 => OrientTransform::catalog(),
            TransformSet::Identity => vec![OrientTransform::IDENTITY],
            TransformSet::ThreePlane => OrientTransform::three_planes(),
        }
    }

    /// Default thresholds: the cross-validated pair for 24 votes, majority
    /// for three votes, plain thresholding for one.
    pub fn default_fusion(self) -> FusionParams {
        match self {
            TransformSet::All24 => FusionParams::DEFAULT,
            TransformSet::Identity => FusionParams { tau1: 0, tau2: 0, n_votes: 1 },
            TransformSet::ThreePlane => FusionParams { tau1: 1, tau2: 1, n_votes: 3 },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferCmd {
    pub checkpoint: Option<PathBuf>,
    /// Cohort directory or manifest.
    pub data: Option<PathBuf>,
    /// Single-subject inputs, used when `data` is absent.
    pub inputs: Vec<(String, PathBuf)>,
    pub id: Option<String>,
    pub out: Option<PathBuf>,
    /// Overrides the inference statistics stored in the checkpoint.
    pub stats: Option<InferenceStats>,
    pub transforms: TransformSet,
    pub tau1: Option<u16>,
    pub tau2: Option<u16>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalCmd {
    pub pred: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub rater1: Option<PathBuf>,
    pub rater2: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepCmd {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    /// Directory of cached `<id>_confidence.nii.gz` maps; no inference runs
    /// when every map is present.
    pub confidence: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub stats: Option<InferenceStats>,
    pub transforms: TransformSet,
    /// Empty means `0..=n_votes`.
    pub tau1_grid: Vec<u16>,
    pub tau2_grid: Vec<u16>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsCmd {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub stats: Option<InferenceStats>,
    /// Unit indices; empty means the first encoder unit and the bottleneck.
    pub layers: Vec<usize>,
}
