//! Cohort-level glue: per-view masks computed once and reused by 24-way
//! fusion, the 3-plane majority vote and threshold sweeps.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fusion::{accumulate, fuse, majority_vote_3plane, predict_view, FusionParams, SlabPredictor, SweepSubject};
use crate::metrics::{evaluate_cohort, MetricsReport};
use crate::orient::{Dihedral, OrientTransform, Plane};
use crate::phantom::PhantomSubject;
use crate::tinynet::TrainingSubject;
use crate::volio::{BinaryMask3D, ConfidenceMap, MultiContrastVolume};

/// Back-transformed binary masks of a set of views of one volume.
#[derive(Debug, Clone)]
pub struct ViewMasks {
    pub transforms: Vec<OrientTransform>,
    pub masks: Vec<BinaryMask3D>,
}

impl ViewMasks {
    /// Segments every view (views run in parallel).
    pub fn predict<P: SlabPredictor + ?Sized>(
        mcv: &MultiContrastVolume,
        predictor: &P,
        transforms: &[OrientTransform],
    ) -> Result<Self> {
        if transforms.is_empty() {
            return Err(Error::Empty("transform list".into()));
        }
        let masks = transforms.par_iter().map(|&t| predict_view(mcv, predictor, t)).collect::<Result<Vec<_>>>()?;
        Ok(Self { transforms: transforms.to_vec(), masks })
    }

    /// All 24 views.
    pub fn predict_all<P: SlabPredictor + ?Sized>(mcv: &MultiContrastVolume, predictor: &P) -> Result<Self> {
        Self::predict(mcv, predictor, &OrientTransform::catalog())
    }

    pub fn confidence(&self) -> Result<ConfidenceMap> {
        accumulate(&self.masks)
    }

    fn plane_mask(&self, plane: Plane) -> Result<&BinaryMask3D> {
        let want = OrientTransform::new(plane, Dihedral::IDENTITY);
        self.transforms
            .iter()
            .position(|&t| t == want)
            .map(|i| &self.masks[i])
            .ok_or_else(|| Error::Param(format!("no identity view for the {} plane", plane.name())))
    }

    /// Voxelwise 2-of-3 vote of the unaugmented axial, sagittal and coronal views.
    pub fn three_plane_vote(&self) -> Result<BinaryMask3D> {
        majority_vote_3plane([
            self.plane_mask(Plane::Axial)?,
            self.plane_mask(Plane::Sagittal)?,
            self.plane_mask(Plane::Coronal)?,
        ])
    }
}

impl From<&PhantomSubject> for TrainingSubject {
    fn from(s: &PhantomSubject) -> Self {
        TrainingSubject { mcv: s.mcv.clone(), rater1: s.rater1.clone(), rater2: s.rater2.clone() }
    }
}

/// Cached predictions of one evaluation subject.
#[derive(Debug, Clone)]
pub struct EvalSubject {
    pub views: ViewMasks,
    pub confidence: ConfidenceMap,
    pub rater1: BinaryMask3D,
    pub rater2: BinaryMask3D,
}

impl EvalSubject {
    pub fn sweep_subject(&self) -> SweepSubject {
        SweepSubject { confidence: self.confidence.clone(), rater1: self.rater1.clone(), rater2: self.rater2.clone() }
    }
}

/// Runs all 24 views on every subject once.
pub fn predict_cohort<P: SlabPredictor + ?Sized>(
    subjects: &[(MultiContrastVolume, BinaryMask3D, BinaryMask3D)],
    predictor: &P,
) -> Result<Vec<EvalSubject>> {
    subjects
        .iter()
        .map(|(mcv, r1, r2)| {
            let views = ViewMasks::predict_all(mcv, predictor)?;
            let confidence = views.confidence()?;
            Ok(EvalSubject { views, confidence, rater1: r1.clone(), rater2: r2.clone() })
        })
        .collect()
}

fn raters(cohort: &[EvalSubject]) -> (Vec<BinaryMask3D>, Vec<BinaryMask3D>) {
    (cohort.iter().map(|s| s.rater1.clone()).collect(), cohort.iter().map(|s| s.rater2.clone()).collect())
}

/// Report of fused 24-view predictions at thresholds `p`.
pub fn evaluate_fused(cohort: &[EvalSubject], p: &FusionParams) -> Result<MetricsReport> {
    let preds = cohort.iter().map(|s| fuse(&s.confidence, p)).collect::<Result<Vec<_>>>()?;
    let (r1, r2) = raters(cohort);
    evaluate_cohort(&preds, &r1, &r2)
}

/// Report of the 3-plane majority vote.
pub fn evaluate_three_plane(cohort: &[EvalSubject]) -> Result<MetricsReport> {
    let preds = cohort.iter().map(|s| s.views.three_plane_vote()).collect::<Result<Vec<_>>>()?;
    let (r1, r2) = raters(cohort);
    evaluate_cohort(&preds, &r1, &r2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orient::Slab25D;

    /// Thresholds the center FLAIR channel.
    fn flair_threshold(slab: &Slab25D) -> Result<Vec<f32>> {
        Ok(slab.channel(10).iter().map(|&v| if v > 0.75 { 1.0 } else { 0.0 }).collect())
    }

    #[test]
    fn orientation_equivariant_predictor_gives_unanimous_votes() {
        let cfg = crate::phantom::PhantomConfig {
            dims: [20, 18, 16],
            lesion_count: (2, 2),
            lesion_radius: (1.5, 2.0),
            noise_std: 0.0,
            texture: 0.0,
            seed: 2,
            ..Default::default()
        };
        let s = crate::phantom::generate_subject(&cfg, 0).unwrap();
        let views = ViewMasks::predict_all(&s.mcv, &flair_threshold).unwrap();
        let c = views.confidence().unwrap();
        assert!(c.counts().data().iter().all(|&v| v == 0 || v == 24));
        assert_eq!(c.above(23), s.rater1);
        assert_eq!(views.three_plane_vote().unwrap(), s.rater1);
    }
}
