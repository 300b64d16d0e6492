//! Segmentation quality measures: voxel overlap, lesion-wise detection,
//! lesion-volume correlation and the weighted composite score, with
//! averaging across two reference raters.

use serde::{Deserialize, Serialize};

use crate::components::label_26;
use crate::error::{Error, Result};
use crate::volio::BinaryMask3D;

/// Value used when a ratio's denominator is zero. All conventions live here
/// so that "perfect on empty" cases score perfectly.
pub mod empty_convention {
    /// PPV when the prediction is empty.
    pub const PPV_EMPTY_PRED: f64 = 1.0;
    /// TPR when the reference is empty.
    pub const TPR_EMPTY_GT: f64 = 1.0;
    /// DSC when both masks are empty.
    pub const DSC_BOTH_EMPTY: f64 = 1.0;
    /// LTPR when the reference has no lesions.
    pub const LTPR_EMPTY_GT: f64 = 1.0;
    /// LFPR when the prediction has no lesions.
    pub const LFPR_EMPTY_PRED: f64 = 0.0;
}

fn ratio(num: usize, den: usize, empty: f64) -> f64 {
    if den == 0 { empty } else { num as f64 / den as f64 }
}

fn check_dims(pred: &BinaryMask3D, gt: &BinaryMask3D) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!("prediction {:?} vs reference {:?}", pred.dims(), gt.dims())));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelMetrics {
    pub dsc: f64,
    pub ppv: f64,
    pub tpr: f64,
}

pub fn voxel_metrics(pred: &BinaryMask3D, gt: &BinaryMask3D) -> Result<VoxelMetrics> {
    check_dims(pred, gt)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    use empty_convention::*;
    Ok(VoxelMetrics {
        dsc: ratio(2 * tp, 2 * tp + fp + fn_, DSC_BOTH_EMPTY),
        ppv: ratio(tp, tp + fp, PPV_EMPTY_PRED),
        tpr: ratio(tp, tp + fn_, TPR_EMPTY_GT),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LesionMetrics {
    pub ltpr: f64,
    pub lfpr: f64,
}

/// Lesions are 26-connected components; a lesion counts as matched when it
/// shares at least one voxel with the other mask.
pub fn lesion_metrics(pred: &BinaryMask3D, gt: &BinaryMask3D) -> Result<LesionMetrics> {
    check_dims(pred, gt)?;
    let gt_c = label_26(gt);
    let pred_c = label_26(pred);
    let detected = gt_c.touched_by(pred).iter().skip(1).filter(|&&h| h).count();
    let true_pred = pred_c.touched_by(gt).iter().skip(1).filter(|&&h| h).count();
    use empty_convention::*;
    Ok(LesionMetrics {
        ltpr: ratio(detected, gt_c.count, LTPR_EMPTY_GT),
        lfpr: ratio(pred_c.count - true_pred, pred_c.count, LFPR_EMPTY_PRED),
    })
}

/// Pearson correlation of predicted vs reference lesion volumes.
pub fn volume_correlation(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("{} vs {} volumes", pred.len(), gt.len())));
    }
    if pred.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!("need at least 2 subjects, got {}", pred.len())));
    }
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mg = gt.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        sxy += (p - mp) * (g - mg);
        sxx += (p - mp) * (p - mp);
        syy += (g - mg) * (g - mg);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant volume list".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// `DSC/8 + PPV/8 + LTPR/4 + (1 - LFPR)/4 + VC/4`.
pub fn score(dsc: f64, ppv: f64, ltpr: f64, lfpr: f64, vc: f64) -> f64 {
    dsc / 8.0 + ppv / 8.0 + ltpr / 4.0 + (1.0 - lfpr) / 4.0 + vc / 4.0
}

/// Per-subject measures against one reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub dsc: f64,
    pub ppv: f64,
    pub tpr: f64,
    pub lfpr: f64,
    pub ltpr: f64,
    pub pred_volume: f64,
    pub gt_volume: f64,
}

pub fn subject_metrics(pred: &BinaryMask3D, gt: &BinaryMask3D) -> Result<SubjectMetrics> {
    let v = voxel_metrics(pred, gt)?;
    let l = lesion_metrics(pred, gt)?;
    Ok(SubjectMetrics {
        dsc: v.dsc,
        ppv: v.ppv,
        tpr: v.tpr,
        lfpr: l.lfpr,
        ltpr: l.ltpr,
        pred_volume: pred.volume_mm3(),
        gt_volume: gt.volume_mm3(),
    })
}

/// Cohort-level measures. `vc` is `None` when the cohort has a single
/// subject; the score then omits the VC term and `partial` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub dsc: f64,
    pub ppv: f64,
    pub tpr: f64,
    pub lfpr: f64,
    pub ltpr: f64,
    pub vc: Option<f64>,
    pub score: f64,
    pub partial: bool,
}

impl Summary {
    fn from_subjects(rows: &[SubjectMetrics], warnings: &mut Vec<String>) -> Summary {
        let n = rows.len() as f64;
        let mean = |f: fn(&SubjectMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let (dsc, ppv, tpr, lfpr, ltpr) =
            (mean(|r| r.dsc), mean(|r| r.ppv), mean(|r| r.tpr), mean(|r| r.lfpr), mean(|r| r.ltpr));
        let pv: Vec<f64> = rows.iter().map(|r| r.pred_volume).collect();
        let gv: Vec<f64> = rows.iter().map(|r| r.gt_volume).collect();
        let vc = if rows.len() < 2 {
            warnings.push("single-subject cohort: VC undefined, score excludes the VC term".into());
            None
        } else {
            match volume_correlation(&pv, &gv) {
                Ok(r) => Some(r),
                Err(_) => {
                    warnings.push("constant lesion volumes: VC set to 0".into());
                    Some(0.0)
                }
            }
        };
        let score = score(dsc, ppv, ltpr, lfpr, vc.unwrap_or(0.0));
        Summary { dsc, ppv, tpr, lfpr, ltpr, vc, score, partial: vc.is_none() }
    }

    fn average(items: &[Summary]) -> Summary {
        let n = items.len() as f64;
        let mean = |f: fn(&Summary) -> f64| items.iter().map(f).sum::<f64>() / n;
        let vc = items.iter().map(|s| s.vc).collect::<Option<Vec<f64>>>().map(|v| v.iter().sum::<f64>() / n);
        Summary {
            dsc: mean(|s| s.dsc),
            ppv: mean(|s| s.ppv),
            tpr: mean(|s| s.tpr),
            lfpr: mean(|s| s.lfpr),
            ltpr: mean(|s| s.ltpr),
            vc,
            score: mean(|s| s.score),
            partial: vc.is_none(),
        }
    }
}

/// Two-rater cohort report: rater-averaged summary plus each rater's own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub summary: Summary,
    pub n_subjects: usize,
    pub raters: Vec<Summary>,
    /// Per-subject rows, indexed `[rater][subject]`.
    pub subjects: Vec<Vec<SubjectMetrics>>,
    pub warnings: Vec<String>,
}

impl std::ops::Deref for MetricsReport {
    type Target = Summary;
    fn deref(&self) -> &Summary {
        &self.summary
    }
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "subject,rater,dsc,ppv,tpr,lfpr,ltpr,pred_volume,gt_volume";

    /// Per-subject rows followed by per-rater and averaged cohort rows.
    pub fn to_csv(&self, subject_ids: &[String]) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for (r, rows) in self.subjects.iter().enumerate() {
            for (i, m) in rows.iter().enumerate() {
                let id = subject_ids.get(i).cloned().unwrap_or_else(|| i.to_string());
                out.push_str(&format!(
                    "{id},{},{},{},{},{},{},{},{}\n",
                    r + 1,
                    m.dsc,
                    m.ppv,
                    m.tpr,
                    m.lfpr,
                    m.ltpr,
                    m.pred_volume,
                    m.gt_volume
                ));
            }
        }
        out.push_str("\nscope,dsc,ppv,tpr,lfpr,ltpr,vc,score,partial\n");
        let fmt = |scope: &str, s: &Summary| {
            format!(
                "{scope},{},{},{},{},{},{},{},{}\n",
                s.dsc,
                s.ppv,
                s.tpr,
                s.lfpr,
                s.ltpr,
                s.vc.map(|v| v.to_string()).unwrap_or_default(),
                s.score,
                s.partial
            )
        };
        for (r, s) in self.raters.iter().enumerate() {
            out.push_str(&fmt(&format!("rater{}", r + 1), s));
        }
        out.push_str(&fmt("mean", &self.summary));
        out
    }
}

/// Evaluates predictions against each rater separately (subject means, VC
/// over the cohort) and averages the two rater summaries.
pub fn evaluate_cohort(
    preds: &[BinaryMask3D],
    rater1: &[BinaryMask3D],
    rater2: &[BinaryMask3D],
) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(Error::Empty("evaluation cohort".into()));
    }
    if preds.len() != rater1.len() || preds.len() != rater2.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {}/{} reference masks",
            preds.len(),
            rater1.len(),
            rater2.len()
        )));
    }
    let mut warnings = Vec::new();
    let mut subjects = Vec::with_capacity(2);
    let mut raters = Vec::with_capacity(2);
    for refs in [rater1, rater2] {
        let rows = preds.iter().zip(refs).map(|(p, g)| subject_metrics(p, g)).collect::<Result<Vec<_>>>()?;
        raters.push(Summary::from_subjects(&rows, &mut warnings));
        subjects.push(rows);
    }
    warnings.dedup();
    Ok(MetricsReport { summary: Summary::average(&raters), n_subjects: preds.len(), raters, subjects, warnings })
}
