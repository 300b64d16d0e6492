//! Seeded synthetic multicontrast phantoms with ellipsoidal lesions, two
//! rater masks, and simple acquisition corruptions.

mod corrupt;
mod manifest;

pub use corrupt::{corrupt, CorruptionKind, CorruptionSpec};
pub use manifest::{read_cohort, write_cohort, CohortManifest, ManifestEntry, MANIFEST_FILE};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volio::{Availability, BinaryMask3D, Contrast, Dims, Grid3, MultiContrastVolume, Volume3D};

/// Tissue intensities per contrast, ordered T1w, T2w, PDw, FLAIR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntensityModel {
    pub csf: [f32; 4],
    pub gray: [f32; 4],
    pub white: [f32; 4],
    pub lesion: [f32; 4],
}

impl Default for IntensityModel {
    fn default() -> Self {
        Self {
            csf: [0.20, 0.90, 0.75, 0.10],
            gray: [0.55, 0.60, 0.70, 0.55],
            white: [0.80, 0.45, 0.60, 0.45],
            lesion: [0.35, 0.85, 0.85, 0.90],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub dims: Dims,
    pub n_subjects: usize,
    /// Inclusive range of lesions per subject.
    pub lesion_count: (usize, usize),
    /// Range of lesion semi-axis lengths in voxels.
    pub lesion_radius: (f32, f32),
    pub intensities: IntensityModel,
    pub noise_std: f32,
    /// Amplitude of the smooth multiplicative tissue texture.
    pub texture: f32,
    /// Probability that a boundary voxel of a perturbed lesion is added or
    /// removed in the second rater's mask.
    pub rater_disagreement: f32,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [48, 48, 48],
            n_subjects: 1,
            lesion_count: (4, 10),
            lesion_radius: (1.5, 4.0),
            intensities: IntensityModel::default(),
            noise_std: 0.03,
            texture: 0.05,
            rater_disagreement: 0.5,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 {
            return Err(Error::Config("n_subjects must be at least 1".into()));
        }
        if self.dims.iter().any(|&d| d < 8) {
            return Err(Error::Config(format!("phantom dims must be at least 8, got {:?}", self.dims)));
        }
        if self.lesion_count.0 > self.lesion_count.1 {
            return Err(Error::Config(format!("empty lesion count range {:?}", self.lesion_count)));
        }
        let (r0, r1) = self.lesion_radius;
        if !(r0 > 0.0 && r0 <= r1) {
            return Err(Error::Config(format!("invalid lesion radius range {:?}", self.lesion_radius)));
        }
        if !(self.noise_std >= 0.0) || !(self.texture >= 0.0) {
            return Err(Error::Config("noise_std and texture must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.rater_disagreement) {
            return Err(Error::Config("rater_disagreement must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSubject {
    pub id: String,
    pub mcv: MultiContrastVolume,
    pub rater1: BinaryMask3D,
    pub rater2: BinaryMask3D,
    pub n_lesions: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tissue {
    Background,
    Csf,
    Gray,
    White,
}

struct Anatomy {
    tissue: Vec<Tissue>,
    /// Normalized ellipsoid radius of the brain at every voxel.
    rho: Vec<f32>,
}

fn anatomy(dims: Dims, rng: &mut ChaCha8Rng) -> Anatomy {
    let [nx, ny, nz] = dims;
    let center: [f32; 3] =
        std::array::from_fn(|i| dims[i] as f32 / 2.0 - 0.5 + rng.random_range(-1.0..1.0f32));
    let axes: [f32; 3] = std::array::from_fn(|i| 0.42 * dims[i] as f32 * rng.random_range(0.95..1.05f32));
    let vent_dx = 0.14 * axes[0];
    let vent_axes = [0.08 * axes[0], 0.28 * axes[1], 0.18 * axes[2]];
    let mut tissue = Vec::with_capacity(nx * ny * nz);
    let mut rho = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [x as f32, y as f32, z as f32];
                let r = (0..3).map(|i| ((p[i] - center[i]) / axes[i]).powi(2)).sum::<f32>().sqrt();
                let in_vent = [-vent_dx, vent_dx].iter().any(|&dx| {
                    let q = [p[0] - center[0] - dx, p[1] - center[1], p[2] - center[2]];
                    (0..3).map(|i| (q[i] / vent_axes[i]).powi(2)).sum::<f32>() <= 1.0
                });
                let t = if r > 1.0 {
                    Tissue::Background
                } else if r > 0.8 {
                    Tissue::Gray
                } else if in_vent {
                    Tissue::Csf
                } else {
                    Tissue::White
                };
                tissue.push(t);
                rho.push(r);
            }
        }
    }
    Anatomy { tissue, rho }
}

struct Lesion {
    center: [f32; 3],
    axes: [f32; 3],
}

impl Lesion {
    fn contains(&self, p: [f32; 3]) -> bool {
        (0..3).map(|i| ((p[i] - self.center[i]) / self.axes[i]).powi(2)).sum::<f32>() <= 1.0
    }

    fn bounds(&self, dims: Dims) -> [(usize, usize); 3] {
        std::array::from_fn(|i| {
            let lo = (self.center[i] - self.axes[i]).floor().max(0.0) as usize;
            let hi = ((self.center[i] + self.axes[i]).ceil() as usize).min(dims[i] - 1);
            (lo, hi)
        })
    }
}

const PLACEMENT_RETRIES: usize = 1000;

/// Places non-touching lesions inside white matter and returns a label grid
/// (0 = no lesion, `k` = lesion `k`).
fn place_lesions(cfg: &PhantomConfig, anat: &Anatomy, n: usize, rng: &mut ChaCha8Rng) -> Result<Grid3<u32>> {
    let dims = cfg.dims;
    let mut labels = Grid3::filled(dims, 0u32);
    let (r0, r1) = cfg.lesion_radius;
    for k in 1..=n as u32 {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let r = if r1 > r0 { rng.random_range(r0..=r1) } else { r0 };
            let axes: [f32; 3] = std::array::from_fn(|_| r * rng.random_range(0.75..1.25f32));
            let center: [f32; 3] = std::array::from_fn(|i| rng.random_range(0.0..dims[i] as f32 - 1.0));
            let lesion = Lesion { center, axes };
            let b = lesion.bounds(dims);
            let mut voxels = Vec::new();
            let mut ok = true;
            'scan: for z in b[2].0..=b[2].1 {
                for y in b[1].0..=b[1].1 {
                    for x in b[0].0..=b[0].1 {
                        if !lesion.contains([x as f32, y as f32, z as f32]) {
                            continue;
                        }
                        let i = labels.index(x, y, z);
                        if anat.tissue[i] != Tissue::White || anat.rho[i] > 0.75 {
                            ok = false;
                            break 'scan;
                        }
                        voxels.push((x, y, z));
                    }
                }
            }
            if !ok || voxels.is_empty() {
                continue;
            }
            // keep a two-voxel gap so rater dilation never merges lesions
            let clear = voxels.iter().all(|&(x, y, z)| {
                neighborhood(dims, x, y, z, 2).all(|(a, b, c)| matches!(labels.get(a, b, c), 0))
            });
            if !clear {
                continue;
            }
            for (x, y, z) in voxels {
                labels.set(x, y, z, k);
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Config(format!(
                "could not place lesion {k} of {n} after {PLACEMENT_RETRIES} attempts; reduce lesion count or radius"
            )));
        }
    }
    Ok(labels)
}

fn neighborhood(dims: Dims, x: usize, y: usize, z: usize, r: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    let lo = move |v: usize| v.saturating_sub(r);
    let hi = move |v: usize, d: usize| (v + r).min(d - 1);
    (lo(z)..=hi(z, dims[2]))
        .flat_map(move |c| (lo(y)..=hi(y, dims[1])).flat_map(move |b| (lo(x)..=hi(x, dims[0])).map(move |a| (a, b, c))))
}

const FACE_NEIGHBORS: [[isize; 3]; 6] = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];

fn face_neighbors(dims: Dims, x: usize, y: usize, z: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    FACE_NEIGHBORS.iter().filter_map(move |d| {
        let p = [x as isize + d[0], y as isize + d[1], z as isize + d[2]];
        (0..3).all(|i| p[i] >= 0 && (p[i] as usize) < dims[i]).then(|| (p[0] as usize, p[1] as usize, p[2] as usize))
    })
}

/// Second rater: every lesion is left alone, partially dilated or partially
/// eroded by one voxel (6-neighborhood), each boundary voxel flipping with
/// probability `amplitude`. Erosion never empties a lesion.
fn perturb_rater(labels: &Grid3<u32>, n: usize, amplitude: f32, rng: &mut ChaCha8Rng) -> BinaryMask3D {
    let dims = labels.dims();
    let mut out = labels.map(|l| l != 0);
    for k in 1..=n as u32 {
        let op = rng.random_range(0..3u8);
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels.data()[i] == k).collect();
        let mut changes = Vec::new();
        match op {
            1 => {
                let mut seen = std::collections::BTreeSet::new();
                for &i in &members {
                    let [x, y, z] = labels.coords(i);
                    for (a, b, c) in face_neighbors(dims, x, y, z) {
                        if labels.get(a, b, c) == 0 {
                            seen.insert(labels.index(a, b, c));
                        }
                    }
                }
                for i in seen {
                    if rng.random::<f32>() < amplitude {
                        changes.push((i, true));
                    }
                }
            }
            2 => {
                for &i in &members {
                    let [x, y, z] = labels.coords(i);
                    let boundary = face_neighbors(dims, x, y, z).count() < 6
                        || face_neighbors(dims, x, y, z).any(|(a, b, c)| labels.get(a, b, c) != k);
                    if boundary && rng.random::<f32>() < amplitude {
                        changes.push((i, false));
                    }
                }
                if changes.len() == members.len() {
                    changes.pop();
                }
            }
            _ => {}
        }
        for (i, v) in changes {
            out.data_mut()[i] = v;
        }
    }
    out
}

/// Smooth multiplicative texture `1 + a * mean of three random plane waves`.
fn texture(dims: Dims, amplitude: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let waves: Vec<([f32; 3], f32)> = (0..3)
        .map(|_| {
            let k: [f32; 3] =
                std::array::from_fn(|i| rng.random_range(0.5..2.0f32) * std::f32::consts::TAU / dims[i] as f32);
            (k, rng.random_range(0.0..std::f32::consts::TAU))
        })
        .collect();
    let [nx, ny, nz] = dims;
    let mut out = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let s: f32 =
                    waves.iter().map(|(k, ph)| (k[0] * x as f32 + k[1] * y as f32 + k[2] * z as f32 + ph).sin()).sum();
                out.push(1.0 + amplitude * s / 3.0);
            }
        }
    }
    out
}

fn subject_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Generates subject `index` of the cohort described by `cfg`.
pub fn generate_subject(cfg: &PhantomConfig, index: usize) -> Result<PhantomSubject> {
    cfg.validate()?;
    let mut rng = subject_rng(cfg.seed, index);
    let dims = cfg.dims;
    let anat = anatomy(dims, &mut rng);
    let n = rng.random_range(cfg.lesion_count.0..=cfg.lesion_count.1);
    let labels = place_lesions(cfg, &anat, n, &mut rng)?;
    let rater2 = perturb_rater(&labels, n, cfg.rater_disagreement, &mut rng);
    let rater1 = labels.map(|l| l != 0);
    let tex = texture(dims, cfg.texture, &mut rng);
    let noise = Normal::new(0.0f32, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let m = &cfg.intensities;
    let mut pairs = Vec::with_capacity(4);
    for c in Contrast::ALL {
        let ci = c.index();
        let data: Vec<f32> = (0..labels.len())
            .map(|i| {
                let base = if labels.data()[i] != 0 {
                    m.lesion[ci]
                } else {
                    match anat.tissue[i] {
                        Tissue::Background => 0.0,
                        Tissue::Csf => m.csf[ci],
                        Tissue::Gray => m.gray[ci],
                        Tissue::White => m.white[ci],
                    }
                };
                base * tex[i] + noise.sample(&mut rng)
            })
            .collect();
        pairs.push((c, Volume3D::from_vec(dims, data)?));
    }
    Ok(PhantomSubject {
        id: format!("sub-{index:03}"),
        mcv: MultiContrastVolume::from_pairs(pairs)?,
        rater1,
        rater2,
        n_lesions: n,
    })
}

/// Generates the whole cohort; subjects are independent RNG streams of the
/// same seed, so the result does not depend on thread scheduling.
pub fn generate(cfg: &PhantomConfig) -> Result<Vec<PhantomSubject>> {
    cfg.validate()?;
    (0..cfg.n_subjects).into_par_iter().map(|i| generate_subject(cfg, i)).collect()
}

/// Mean FLAIR intensity inside the lesions minus the mean over the
/// one-voxel shell around them (26-neighborhood).
pub fn lesion_contrast(subject: &PhantomSubject, contrast: Contrast) -> Option<f64> {
    let vol = subject.mcv.get(contrast)?;
    let mask = &subject.rater1;
    let dims = mask.dims();
    let (mut sin, mut nin, mut sout, mut nout) = (0.0, 0usize, 0.0, 0usize);
    let mut shell = vec![false; mask.len()];
    for i in 0..mask.len() {
        if mask.data()[i] {
            sin += vol.data()[i] as f64;
            nin += 1;
            let [x, y, z] = mask.coords(i);
            for (a, b, c) in neighborhood(dims, x, y, z, 1) {
                let j = mask.index(a, b, c);
                if !mask.data()[j] {
                    shell[j] = true;
                }
            }
        }
    }
    for (i, &s) in shell.iter().enumerate() {
        if s {
            sout += vol.data()[i] as f64;
            nout += 1;
        }
    }
    (nin > 0 && nout > 0).then(|| sin / nin as f64 - sout / nout as f64)
}

/// Availability of a freshly generated phantom.
pub const PHANTOM_AVAILABILITY: Availability = Availability::FULL;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::voxel_metrics;

    fn small(seed: u64) -> PhantomConfig {
        PhantomConfig { dims: [32, 32, 32], n_subjects: 2, lesion_count: (2, 4), seed, ..Default::default() }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate(&small(3)).unwrap(), generate(&small(3)).unwrap());
        assert_ne!(generate(&small(3)).unwrap(), generate(&small(4)).unwrap());
    }

    #[test]
    fn zero_lesions() {
        let cfg = PhantomConfig { lesion_count: (0, 0), ..small(1) };
        for s in generate(&cfg).unwrap() {
            assert_eq!(s.rater1.count(), 0);
            assert_eq!(s.rater2.count(), 0);
            assert!(s.mcv.get(Contrast::Flair).unwrap().data().iter().any(|&v| v > 0.3));
        }
    }

    #[test]
    fn raters_agree_and_lesions_stand_out() {
        for s in generate(&small(9)).unwrap() {
            let m = voxel_metrics(&s.rater2, &s.rater1).unwrap();
            assert!(m.dsc >= 0.7, "rater DSC {}", m.dsc);
            assert!(lesion_contrast(&s, Contrast::Flair).unwrap() > 0.09);
            assert!(lesion_contrast(&s, Contrast::T1w).unwrap() < 0.0);
        }
    }

    #[test]
    fn impossible_placement_is_config_error() {
        let cfg = PhantomConfig { lesion_count: (200, 200), lesion_radius: (5.0, 6.0), ..small(0) };
        assert!(matches!(generate_subject(&cfg, 0), Err(Error::Config(_))));
    }
}
