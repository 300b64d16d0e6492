use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volio::{Contrast, Dims, MultiContrastVolume, Volume3D};

/// Simulated acquisition artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorruptionKind {
    /// `v <- v_max * (v / v_max)^gamma`, sign preserved.
    Gamma { gamma: f32 },
    GaussianNoise { sigma: f32 },
    /// Multiplicative `exp(strength * p)` with `p` a random quadratic
    /// polynomial of unit spatial std, rescaled to mean 1.
    BiasField { strength: f32 },
    Blur { sigma: f32 },
    /// Keeps every `factor`-th z slice and repeats it (nearest upsampling).
    Anisotropy { factor: usize },
    /// Adds `intensity` times a copy circularly shifted by a quarter of the
    /// extent along `axis`.
    Ghosting { intensity: f32, axis: usize },
    /// Convex mix `(1 - weight) v + weight * mean(copies)` of 2 to 4 copies
    /// translated by up to `max_shift` voxels.
    Motion { weight: f32, max_shift: usize },
    DropContrast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    #[serde(flatten)]
    pub kind: CorruptionKind,
    /// Contrast to corrupt; `None` means every present contrast.
    #[serde(default)]
    pub target: Option<Contrast>,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, target: Option<Contrast>) -> Self {
        Self { kind, target }
    }
}

/// Applies one corruption. Masks are untouched by construction; dims are
/// preserved.
pub fn corrupt(mcv: &MultiContrastVolume, spec: &CorruptionSpec, rng: &mut impl Rng) -> Result<MultiContrastVolume> {
    if let CorruptionKind::DropContrast = spec.kind {
        let target = spec.target.ok_or_else(|| Error::Param("drop_contrast needs a target contrast".into()))?;
        if !mcv.availability().contains(target) {
            return Ok(mcv.clone());
        }
        let mut vols = mcv.volumes().clone();
        vols[target.index()] = None;
        return MultiContrastVolume::new(vols);
    }
    if let Some(t) = spec.target {
        if !mcv.availability().contains(t) {
            return Err(Error::Param(format!("corruption target {} is not present", t.name())));
        }
    }
    validate(&spec.kind)?;
    let mut vols = mcv.volumes().clone();
    for c in Contrast::ALL {
        if spec.target.is_some_and(|t| t != c) {
            continue;
        }
        if let Some(v) = vols[c.index()].as_mut() {
            *v = apply(v, &spec.kind, rng)?;
        }
    }
    MultiContrastVolume::new(vols)
}

fn validate(kind: &CorruptionKind) -> Result<()> {
    let bad = |m: &str| Err(Error::Param(m.to_string()));
    match *kind {
        CorruptionKind::Gamma { gamma } if !(gamma > 0.0 && gamma.is_finite()) => bad("gamma must be positive"),
        CorruptionKind::GaussianNoise { sigma } | CorruptionKind::Blur { sigma } if !(sigma >= 0.0) => {
            bad("sigma must be non-negative")
        }
        CorruptionKind::BiasField { strength } if !(strength >= 0.0) => bad("strength must be non-negative"),
        CorruptionKind::Anisotropy { factor: 0 } => bad("anisotropy factor must be positive"),
        CorruptionKind::Ghosting { axis, .. } if axis > 2 => bad("ghosting axis must be 0, 1 or 2"),
        CorruptionKind::Motion { weight, .. } if !(0.0..=1.0).contains(&weight) => bad("motion weight must lie in [0, 1]"),
        _ => Ok(()),
    }
}

fn apply(v: &Volume3D, kind: &CorruptionKind, rng: &mut impl Rng) -> Result<Volume3D> {
    let dims = v.dims();
    Ok(match *kind {
        CorruptionKind::Gamma { gamma } => {
            let vmax = v.data().iter().fold(0.0f32, |m, x| m.max(x.abs()));
            if gamma == 1.0 || vmax == 0.0 {
                v.clone()
            } else {
                v.map(|x| x.signum() * vmax * (x.abs() / vmax).powf(gamma))
            }
        }
        CorruptionKind::GaussianNoise { sigma } => {
            if sigma == 0.0 {
                v.clone()
            } else {
                let n = Normal::new(0.0, sigma).map_err(|e| Error::Param(e.to_string()))?;
                let data = v.data().iter().map(|&x| x + n.sample(rng)).collect();
                Volume3D::with_spacing(dims, v.spacing(), data)?
            }
        }
        CorruptionKind::BiasField { strength } => {
            let field = bias_field(dims, strength, rng);
            let data = v.data().iter().zip(&field).map(|(&x, &f)| x * f).collect();
            Volume3D::with_spacing(dims, v.spacing(), data)?
        }
        CorruptionKind::Blur { sigma } => gaussian_blur(v, sigma),
        CorruptionKind::Anisotropy { factor } => Volume3D::from_fn(dims, |x, y, z| v.get(x, y, (z / factor) * factor))
            .with_same_spacing(v),
        CorruptionKind::Ghosting { intensity, axis } => {
            let shift = (dims[axis] / 4).max(1);
            Volume3D::from_fn(dims, |x, y, z| {
                let mut p = [x, y, z];
                p[axis] = (p[axis] + dims[axis] - shift % dims[axis]) % dims[axis];
                v.get(x, y, z) + intensity * v.get(p[0], p[1], p[2])
            })
            .with_same_spacing(v)
        }
        CorruptionKind::Motion { weight, max_shift } => {
            let copies = rng.random_range(2..=4usize);
            let m = max_shift as i64;
            let shifts: Vec<[isize; 3]> =
                (0..copies).map(|_| std::array::from_fn(|_| rng.random_range(-m..=m) as isize)).collect();
            Volume3D::from_fn(dims, |x, y, z| {
                let mean = shifts
                    .iter()
                    .map(|s| {
                        let p = [x as isize - s[0], y as isize - s[1], z as isize - s[2]];
                        if (0..3).all(|i| p[i] >= 0 && (p[i] as usize) < dims[i]) {
                            v.get(p[0] as usize, p[1] as usize, p[2] as usize)
                        } else {
                            0.0
                        }
                    })
                    .sum::<f32>()
                    / copies as f32;
                (1.0 - weight) * v.get(x, y, z) + weight * mean
            })
            .with_same_spacing(v)
        }
        CorruptionKind::DropContrast => unreachable!("handled by the caller"),
    })
}

trait SameSpacing {
    fn with_same_spacing(self, like: &Volume3D) -> Self;
}

impl SameSpacing for Volume3D {
    fn with_same_spacing(mut self, like: &Volume3D) -> Self {
        self.set_spacing(like.spacing());
        self
    }
}

/// Field of spatial std about `strength` (for small strengths) and mean 1.
pub(crate) fn bias_field(dims: Dims, strength: f32, rng: &mut impl Rng) -> Vec<f32> {
    let coef: [f64; 9] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let norm = |i: usize, d: usize| if d > 1 { 2.0 * i as f64 / (d - 1) as f64 - 1.0 } else { 0.0 };
    let [nx, ny, nz] = dims;
    let mut p = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let (a, b, c) = (norm(x, nx), norm(y, ny), norm(z, nz));
                let t = [a, b, c, a * a, b * b, c * c, a * b, a * c, b * c];
                p.push(t.iter().zip(&coef).map(|(u, k)| u * k).sum::<f64>());
            }
        }
    }
    let n = p.len() as f64;
    let mean = p.iter().sum::<f64>() / n;
    let std = (p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    let field: Vec<f64> = p.iter().map(|v| (strength as f64 * (v - mean) / std).exp()).collect();
    let fmean = field.iter().sum::<f64>() / n;
    field.iter().map(|f| (f / fmean) as f32).collect()
}

/// Separable Gaussian blur with edge clamping, truncated at 3 sigma.
fn gaussian_blur(v: &Volume3D, sigma: f32) -> Volume3D {
    if sigma == 0.0 {
        return v.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= s);
    let dims = v.dims();
    let mut cur = v.clone();
    for axis in 0..3 {
        let src = cur.clone();
        cur = Volume3D::from_fn(dims, |x, y, z| {
            let mut acc = 0.0;
            for (j, w) in k.iter().enumerate() {
                let mut p = [x as isize, y as isize, z as isize];
                p[axis] = (p[axis] + j as isize - r).clamp(0, dims[axis] as isize - 1);
                acc += w * src.get(p[0] as usize, p[1] as usize, p[2] as usize);
            }
            acc
        })
        .with_same_spacing(v);
    }
    cur
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mcv() -> MultiContrastVolume {
        let v = Volume3D::from_fn([10, 9, 8], |x, y, z| 0.1 + (x * y + z) as f32 / 100.0);
        MultiContrastVolume::from_pairs(Contrast::ALL.map(|c| (c, v.clone()))).unwrap()
    }

    fn run(kind: CorruptionKind, target: Option<Contrast>, seed: u64) -> Result<MultiContrastVolume> {
        corrupt(&mcv(), &CorruptionSpec::new(kind, target), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn identities() {
        assert_eq!(run(CorruptionKind::Gamma { gamma: 1.0 }, None, 0).unwrap(), mcv());
        assert_eq!(run(CorruptionKind::GaussianNoise { sigma: 0.0 }, None, 0).unwrap(), mcv());
        assert_eq!(run(CorruptionKind::Blur { sigma: 0.0 }, None, 0).unwrap(), mcv());
        assert_eq!(run(CorruptionKind::Anisotropy { factor: 1 }, None, 0).unwrap(), mcv());
    }

    #[test]
    fn deterministic_and_shape_preserving() {
        let kinds = [
            CorruptionKind::Gamma { gamma: 1.5 },
            CorruptionKind::GaussianNoise { sigma: 0.1 },
            CorruptionKind::BiasField { strength: 0.3 },
            CorruptionKind::Blur { sigma: 1.0 },
            CorruptionKind::Anisotropy { factor: 3 },
            CorruptionKind::Ghosting { intensity: 0.2, axis: 1 },
            CorruptionKind::Motion { weight: 0.3, max_shift: 2 },
        ];
        for k in kinds {
            let a = run(k.clone(), Some(Contrast::T2w), 5).unwrap();
            assert_eq!(a, run(k.clone(), Some(Contrast::T2w), 5).unwrap());
            assert_eq!(a.dims(), [10, 9, 8]);
            assert_eq!(a.get(Contrast::T1w), mcv().get(Contrast::T1w));
        }
    }

    #[test]
    fn bias_field_statistics() {
        let ones = Volume3D::filled([24, 24, 24], 1.0);
        let m = MultiContrastVolume::from_pairs([(Contrast::T1w, ones)]).unwrap();
        for seed in 0..5 {
            let spec = CorruptionSpec::new(CorruptionKind::BiasField { strength: 0.3 }, None);
            let out = corrupt(&m, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let d = out.get(Contrast::T1w).unwrap().data();
            let n = d.len() as f64;
            let mean = d.iter().map(|&v| v as f64).sum::<f64>() / n;
            let std = (d.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
            assert!((0.05..=0.5).contains(&std), "std {std}");
        }
    }

    #[test]
    fn drop_contrast() {
        let out = run(CorruptionKind::DropContrast, Some(Contrast::Flair), 0).unwrap();
        assert!(!out.availability().contains(Contrast::Flair));
        assert_eq!(corrupt(&out, &CorruptionSpec::new(CorruptionKind::DropContrast, Some(Contrast::Flair)), &mut ChaCha8Rng::seed_from_u64(0)).unwrap(), out);
        assert!(run(CorruptionKind::Gamma { gamma: 2.0 }, Some(Contrast::Flair), 0).is_ok());
        assert!(corrupt(&out, &CorruptionSpec::new(CorruptionKind::Gamma { gamma: 2.0 }, Some(Contrast::Flair)), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn spec_json() {
        let s: CorruptionSpec = serde_json::from_str(r#"{"kind":"gamma","gamma":0.7,"target":"FLAIR"}"#).unwrap();
        assert_eq!(s, CorruptionSpec::new(CorruptionKind::Gamma { gamma: 0.7 }, Some(Contrast::Flair)));
        assert!(serde_json::from_str::<CorruptionSpec>(r#"{"kind":"sparkle"}"#).is_err());
    }
}
