//! Random spatial warps applied to whole training volumes before slab
//! extraction: a smooth elastic displacement field or a small affine.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::orient::Plane;
use crate::volio::{BinaryMask3D, Dims, MultiContrastVolume, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarpKind {
    Elastic,
    Affine,
}

/// Pull-back map from output voxel coordinates to source coordinates.
#[derive(Debug, Clone)]
pub enum SpatialWarp {
    Affine {
        /// Row-major 3×3 linear part acting about the volume centre.
        matrix: [[f64; 3]; 3],
        center: [f64; 3],
    },
    /// Displacements on a coarse control grid, trilinearly interpolated.
    Elastic {
        grid: [usize; 3],
        /// `[gz][gy][gx][3]`
        displacement: Vec<[f64; 3]>,
        dims: Dims,
    },
}

const ELASTIC_CONTROL_POINTS: usize = 5;
const ELASTIC_MAX_STD: f64 = 1.5;
const AFFINE_MAX_DEGREES: f64 = 10.0;
const AFFINE_SCALE: f64 = 0.1;
const AFFINE_SHEAR: f64 = 0.05;

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

impl SpatialWarp {
    pub fn random_affine<R: Rng + ?Sized>(dims: Dims, rng: &mut R) -> Self {
        let mut m = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        for axis in 0..3 {
            let a = rng.random_range(-AFFINE_MAX_DEGREES..=AFFINE_MAX_DEGREES).to_radians();
            let (s, c) = a.sin_cos();
            let (i, j) = ((axis + 1) % 3, (axis + 2) % 3);
            let mut r = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
            r[i][i] = c;
            r[i][j] = -s;
            r[j][i] = s;
            r[j][j] = c;
            m = matmul(&r, &m);
        }
        let mut sh = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        for (i, row) in sh.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                if i == j {
                    *v = 1.0 + rng.random_range(-AFFINE_SCALE..=AFFINE_SCALE);
                } else {
                    *v = rng.random_range(-AFFINE_SHEAR..=AFFINE_SHEAR);
                }
            }
        }
        let center = dims.map(|d| (d as f64 - 1.0) / 2.0);
        SpatialWarp::Affine { matrix: matmul(&m, &sh), center }
    }

    pub fn random_elastic<R: Rng + ?Sized>(dims: Dims, rng: &mut R) -> Self {
        let g = ELASTIC_CONTROL_POINTS;
        let std = rng.random_range(0.5..=ELASTIC_MAX_STD);
        let dist = Normal::new(0.0, std).unwrap();
        let mut displacement = vec![[0.0; 3]; g * g * g];
        for (i, d) in displacement.iter_mut().enumerate() {
            let (x, y, z) = (i % g, (i / g) % g, i / (g * g));
            // border control points stay fixed
            if [x, y, z].iter().any(|&c| c == 0 || c == g - 1) {
                continue;
            }
            *d = [dist.sample(rng), dist.sample(rng), dist.sample(rng)];
        }
        SpatialWarp::Elastic { grid: [g; 3], displacement, dims }
    }

    pub fn random<R: Rng + ?Sized>(kind: WarpKind, dims: Dims, rng: &mut R) -> Self {
        match kind {
            WarpKind::Elastic => Self::random_elastic(dims, rng),
            WarpKind::Affine => Self::random_affine(dims, rng),
        }
    }

    /// Source coordinate sampled for output voxel `p`.
    pub fn source(&self, p: [f64; 3]) -> [f64; 3] {
        match self {
            SpatialWarp::Affine { matrix, center } => {
                let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
                let mut out = *center;
                for i in 0..3 {
                    out[i] += (0..3).map(|j| matrix[i][j] * d[j]).sum::<f64>();
                }
                out
            }
            SpatialWarp::Elastic { grid, displacement, dims } => {
                let mut gc = [0.0; 3];
                let mut i0 = [0usize; 3];
                let mut f = [0.0; 3];
                for a in 0..3 {
                    let span = (dims[a].max(2) - 1) as f64;
                    gc[a] = p[a] / span * (grid[a] - 1) as f64;
                    let fl = gc[a].floor().clamp(0.0, (grid[a] - 2) as f64);
                    i0[a] = fl as usize;
                    f[a] = (gc[a] - fl).clamp(0.0, 1.0);
                }
                let at = |x: usize, y: usize, z: usize| displacement[x + grid[0] * (y + grid[1] * z)];
                let mut d = [0.0; 3];
                for corner in 0..8 {
                    let (cx, cy, cz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
                    let w = (if cx == 1 { f[0] } else { 1.0 - f[0] })
                        * (if cy == 1 { f[1] } else { 1.0 - f[1] })
                        * (if cz == 1 { f[2] } else { 1.0 - f[2] });
                    let v = at(i0[0] + cx, i0[1] + cy, i0[2] + cz);
                    for a in 0..3 {
                        d[a] += w * v[a];
                    }
                }
                [p[0] + d[0], p[1] + d[1], p[2] + d[2]]
            }
        }
    }

    /// Trilinear resampling; outside samples are zero.
    pub fn warp_volume(&self, v: &Volume3D) -> Volume3D {
        self.warp_volume_slab(v, None)
    }

    /// As [`SpatialWarp::warp_volume`], but only voxels whose coordinate on
    /// `axis` lies in `range` are computed; the rest are zero.
    pub fn warp_volume_slab(&self, v: &Volume3D, only: Option<(usize, std::ops::Range<usize>)>) -> Volume3D {
        let [nx, ny, nz] = v.dims();
        let src = v.data();
        let sample = |x: i64, y: i64, z: i64| -> f64 {
            if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 || z >= nz as i64 {
                0.0
            } else {
                src[x as usize + nx * (y as usize + ny * z as usize)] as f64
            }
        };
        let mut out = Volume3D::from_fn(v.dims(), |x, y, z| {
            if let Some((axis, r)) = &only {
                if !r.contains(&[x, y, z][*axis]) {
                    return 0.0;
                }
            }
            let s = self.source([x as f64, y as f64, z as f64]);
            let b = s.map(|c| c.floor());
            let f = [s[0] - b[0], s[1] - b[1], s[2] - b[2]];
            let (bx, by, bz) = (b[0] as i64, b[1] as i64, b[2] as i64);
            let mut acc = 0.0;
            for corner in 0..8 {
                let (cx, cy, cz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
                let w = (if cx == 1 { f[0] } else { 1.0 - f[0] })
                    * (if cy == 1 { f[1] } else { 1.0 - f[1] })
                    * (if cz == 1 { f[2] } else { 1.0 - f[2] });
                if w != 0.0 {
                    acc += w * sample(bx + cx, by + cy, bz + cz);
                }
            }
            acc as f32
        });
        out.set_spacing(v.spacing());
        out
    }

    /// Nearest-neighbour resampling, so labels stay binary.
    pub fn warp_mask(&self, m: &BinaryMask3D) -> BinaryMask3D {
        self.warp_mask_slab(m, None)
    }

    pub fn warp_mask_slab(&self, m: &BinaryMask3D, only: Option<(usize, std::ops::Range<usize>)>) -> BinaryMask3D {
        let [nx, ny, nz] = m.dims();
        let mut out = BinaryMask3D::from_fn(m.dims(), |x, y, z| {
            if let Some((axis, r)) = &only {
                if !r.contains(&[x, y, z][*axis]) {
                    return false;
                }
            }
            let s = self.source([x as f64, y as f64, z as f64]).map(|c| c.round());
            if s.iter().zip([nx, ny, nz]).any(|(&c, n)| c < 0.0 || c >= n as f64) {
                false
            } else {
                m.get(s[0] as usize, s[1] as usize, s[2] as usize)
            }
        });
        out.set_spacing(m.spacing());
        out
    }

    pub fn warp_subject(&self, mcv: &MultiContrastVolume) -> Result<MultiContrastVolume> {
        mcv.map_volumes(|_, v| self.warp_volume(v))
    }

    /// Warps only the slices `center - 1 ..= center + 1` of `plane`, which
    /// is all a 2.5D slab at `center` reads.
    pub fn warp_subject_slab(
        &self,
        mcv: &MultiContrastVolume,
        plane: Plane,
        center: usize,
    ) -> Result<MultiContrastVolume> {
        let only = (plane.slice_axis(), center.saturating_sub(1)..center + 2);
        mcv.map_volumes(|_, v| self.warp_volume_slab(v, Some(only.clone())))
    }
}
