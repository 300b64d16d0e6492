//! Volumetric data types shared by every stage of the pipeline, plus
//! NIfTI-1 reading and writing.
//!
//! Voxels are stored row-major with `x` varying fastest:
//! `index = x + nx * (y + ny * z)`.

mod nifti;

pub use nifti::{
    read_confidence, read_mask, read_nifti, read_volume, write_confidence, write_mask,
    write_volume, NiftiData, NiftiDatatype, NIFTI1_HEADER_SIZE, NIFTI1_MAGIC, NIFTI1_VOX_OFFSET,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extents `(nx, ny, nz)` of a grid.
pub type Dims = [usize; 3];

/// Values a [`Grid3`] may hold, with a per-value validity check.
pub trait Voxel: Copy + Default + PartialEq + Send + Sync + 'static {
    fn is_valid(&self) -> bool {
        true
    }
}

impl Voxel for f32 {
    fn is_valid(&self) -> bool {
        self.is_finite()
    }
}
impl Voxel for bool {}
impl Voxel for u16 {}

/// Dense 3D grid with voxel spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3<T> {
    dims: Dims,
    spacing: [f32; 3],
    data: Vec<T>,
}

/// Scalar intensity volume.
pub type Volume3D = Grid3<f32>;

/// Binary segmentation mask; `true` marks a lesion voxel.
pub type BinaryMask3D = Grid3<bool>;

impl<T: Voxel> Grid3<T> {
    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self> {
        Self::with_spacing(dims, [1.0; 3], data)
    }

    pub fn with_spacing(dims: Dims, spacing: [f32; 3], data: Vec<T>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("dims must be positive, got {dims:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::Shape(format!(
                "expected {n} voxels for dims {dims:?}, got {}",
                data.len()
            )));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Shape(format!("spacing must be positive, got {spacing:?}")));
        }
        if let Some(i) = data.iter().position(|v| !v.is_valid()) {
            return Err(Error::Param(format!("invalid voxel value at index {i}")));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn filled(dims: Dims, value: T) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "dims must be positive");
        Self { dims, spacing: [1.0; 3], data: vec![value; dims[0] * dims[1] * dims[2]] }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut g = Self::filled(dims, T::default());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    g.data[x + dims[0] * (y + dims[1] * z)] = f(x, y, z);
                }
            }
        }
        g
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn set_spacing(&mut self, spacing: [f32; 3]) {
        self.spacing = spacing;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable voxel access. Callers must keep values valid for `T`.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Voxel>(&self, f: impl Fn(T) -> U) -> Grid3<U> {
        Grid3 { dims: self.dims, spacing: self.spacing, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn same_shape<U>(&self, other: &Grid3<U>) -> bool {
        self.dims == other.dims
    }

    pub(crate) fn from_raw_parts(dims: Dims, spacing: [f32; 3], data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), dims[0] * dims[1] * dims[2]);
        Self { dims, spacing, data }
    }
}

impl Volume3D {
    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }
}

impl BinaryMask3D {
    pub fn empty(dims: Dims) -> Self {
        Self::filled(dims, false)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Lesion volume in cubic millimetres.
    pub fn volume_mm3(&self) -> f64 {
        let [sx, sy, sz] = self.spacing;
        self.count() as f64 * (sx as f64 * sy as f64 * sz as f64)
    }

    pub fn is_subset_of(&self, other: &BinaryMask3D) -> bool {
        self.dims == other.dims && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn to_volume(&self) -> Volume3D {
        self.map(|v| if v { 1.0 } else { 0.0 })
    }

    /// Binarizes a probability-like volume with a strict threshold (`v > t`).
    pub fn threshold(vol: &Volume3D, t: f32) -> Self {
        vol.map(|v| v > t)
    }
}

/// Per-voxel vote counts across `n_votes` augmented predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    counts: Grid3<u16>,
    n_votes: u16,
}

impl ConfidenceMap {
    pub fn zeros(dims: Dims, n_votes: u16) -> Self {
        Self { counts: Grid3::filled(dims, 0), n_votes }
    }

    pub fn from_counts(counts: Grid3<u16>, n_votes: u16) -> Result<Self> {
        if let Some(c) = counts.data().iter().find(|&&c| c > n_votes) {
            return Err(Error::Contract(format!("count {c} exceeds n_votes {n_votes}")));
        }
        Ok(Self { counts, n_votes })
    }

    /// Adds one vote at every voxel set in `mask`.
    pub fn accumulate(&mut self, mask: &BinaryMask3D) -> Result<()> {
        if mask.dims() != self.counts.dims() {
            return Err(Error::Shape(format!(
                "mask dims {:?} do not match confidence map dims {:?}",
                mask.dims(),
                self.counts.dims()
            )));
        }
        for (c, &m) in self.counts.data.iter_mut().zip(mask.data()) {
            if m {
                if *c >= self.n_votes {
                    return Err(Error::Contract(format!("more than {} votes accumulated", self.n_votes)));
                }
                *c += 1;
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        self.counts.dims()
    }

    pub fn n_votes(&self) -> u16 {
        self.n_votes
    }

    pub fn counts(&self) -> &Grid3<u16> {
        &self.counts
    }

    pub fn set_spacing(&mut self, spacing: [f32; 3]) {
        self.counts.set_spacing(spacing);
    }

    /// Strict threshold `C(r) > t`.
    pub fn above(&self, t: u16) -> BinaryMask3D {
        self.counts.map(|c| c > t)
    }
}

/// The four MRI contrasts in fixed channel order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Contrast {
    T1w,
    T2w,
    PDw,
    #[serde(rename = "FLAIR")]
    Flair,
}

impl Contrast {
    pub const ALL: [Contrast; 4] = [Contrast::T1w, Contrast::T2w, Contrast::PDw, Contrast::Flair];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn bit(self) -> u8 {
        1 << self.index()
    }

    pub fn name(self) -> &'static str {
        match self {
            Contrast::T1w => "T1w",
            Contrast::T2w => "T2w",
            Contrast::PDw => "PDw",
            Contrast::Flair => "FLAIR",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Contrast::ALL.into_iter().find(|c| c.name().eq_ignore_ascii_case(s))
    }
}

/// 4-bit contrast availability mask (bit `i` set means `Contrast::ALL[i]` present).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Availability(u8);

impl Availability {
    pub const FULL: Availability = Availability(0b1111);
    /// Number of nonzero availability masks.
    pub const N_COMBINATIONS: usize = 15;

    pub fn new(bits: u8) -> Result<Self> {
        if bits == 0 || bits > 0b1111 {
            return Err(Error::InvalidCondition(bits));
        }
        Ok(Self(bits))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn contains(self, c: Contrast) -> bool {
        self.0 & c.bit() != 0
    }

    pub fn count(self) -> u32 {
        self.0.count_ones()
    }

    /// Index into the table of 15 conditional parameter sets.
    pub fn condition_index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn contrasts(self) -> impl Iterator<Item = Contrast> {
        Contrast::ALL.into_iter().filter(move |c| self.contains(*c))
    }
}

/// Co-registered multicontrast volumes; absent contrasts are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiContrastVolume {
    volumes: [Option<Volume3D>; 4],
}

impl MultiContrastVolume {
    pub fn new(volumes: [Option<Volume3D>; 4]) -> Result<Self> {
        let mut present = volumes.iter().flatten();
        let first = present
            .next()
            .ok_or_else(|| Error::Param("at least one contrast must be present".into()))?;
        for v in present {
            if v.dims() != first.dims() || v.spacing() != first.spacing() {
                return Err(Error::Shape(format!(
                    "contrast dims/spacing {:?}/{:?} differ from {:?}/{:?}",
                    v.dims(),
                    v.spacing(),
                    first.dims(),
                    first.spacing()
                )));
            }
        }
        Ok(Self { volumes })
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (Contrast, Volume3D)>) -> Result<Self> {
        let mut volumes: [Option<Volume3D>; 4] = Default::default();
        for (c, v) in pairs {
            volumes[c.index()] = Some(v);
        }
        Self::new(volumes)
    }

    pub fn availability(&self) -> Availability {
        let bits = self
            .volumes
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_some())
            .fold(0u8, |acc, (i, _)| acc | (1 << i));
        Availability(bits)
    }

    fn any(&self) -> &Volume3D {
        self.volumes.iter().flatten().next().expect("nonempty by construction")
    }

    pub fn dims(&self) -> Dims {
        self.any().dims()
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.any().spacing()
    }

    pub fn get(&self, c: Contrast) -> Option<&Volume3D> {
        self.volumes[c.index()].as_ref()
    }

    pub fn volumes(&self) -> &[Option<Volume3D>; 4] {
        &self.volumes
    }

    /// Keeps only the contrasts in `keep`; fails if none of them is present.
    pub fn restrict(&self, keep: Availability) -> Result<Self> {
        let mut volumes = self.volumes.clone();
        for c in Contrast::ALL {
            if !keep.contains(c) {
                volumes[c.index()] = None;
            }
        }
        Self::new(volumes)
    }

    /// Replaces every present volume with `f(contrast, volume)`.
    pub fn map_volumes(&self, mut f: impl FnMut(Contrast, &Volume3D) -> Volume3D) -> Result<Self> {
        let mut volumes: [Option<Volume3D>; 4] = Default::default();
        for c in Contrast::ALL {
            if let Some(v) = self.get(c) {
                volumes[c.index()] = Some(f(c, v));
            }
        }
        Self::new(volumes)
    }

    /// Network-input view: absent contrasts materialize as zero volumes.
    pub fn materialized(&self) -> [Volume3D; 4] {
        let dims = self.dims();
        let spacing = self.spacing();
        Contrast::ALL.map(|c| match self.get(c) {
            Some(v) => v.clone(),
            None => {
                let mut z = Volume3D::zeros(dims);
                z.set_spacing(spacing);
                z
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_contrast_dims() {
        let a = Volume3D::zeros([4, 4, 4]);
        let b = Volume3D::zeros([4, 4, 5]);
        let err = MultiContrastVolume::from_pairs([(Contrast::T1w, a), (Contrast::Flair, b)]);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn rejects_empty_contrast_set() {
        assert!(MultiContrastVolume::new(Default::default()).is_err());
    }

    #[test]
    fn availability_tracks_presence_and_materializes_zeros() {
        let v = Volume3D::filled([2, 2, 2], 3.0);
        let mcv = MultiContrastVolume::from_pairs([(Contrast::T1w, v.clone()), (Contrast::Flair, v)]).unwrap();
        assert_eq!(mcv.availability().bits(), 0b1001);
        let m = mcv.materialized();
        assert!(m[Contrast::T2w.index()].data().iter().all(|&x| x == 0.0));
        assert!(m[Contrast::Flair.index()].data().iter().all(|&x| x == 3.0));
    }

    #[test]
    fn rejects_non_finite_voxels() {
        assert!(Volume3D::from_vec([1, 1, 2], vec![0.0, f32::NAN]).is_err());
    }

    #[test]
    fn index_is_x_fastest() {
        let g = Volume3D::from_fn([3, 4, 5], |x, y, z| (x + 10 * y + 100 * z) as f32);
        assert_eq!(g.data()[1], 1.0);
        assert_eq!(g.data()[3], 10.0);
        assert_eq!(g.data()[12], 100.0);
        assert_eq!(g.coords(g.index(2, 3, 4)), [2, 3, 4]);
    }

    #[test]
    fn confidence_map_rejects_excess_votes() {
        let mut c = ConfidenceMap::zeros([2, 1, 1], 1);
        let m = BinaryMask3D::filled([2, 1, 1], true);
        c.accumulate(&m).unwrap();
        assert!(c.accumulate(&m).is_err());
        assert!(ConfidenceMap::from_counts(Grid3::filled([1, 1, 1], 3), 2).is_err());
    }

    #[test]
    fn availability_rejects_zero() {
        assert!(matches!(Availability::new(0), Err(Error::InvalidCondition(0))));
        assert_eq!(Availability::FULL.condition_index(), 14);
    }
}
