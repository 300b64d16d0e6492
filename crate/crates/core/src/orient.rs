//! The 24 multi-orientation transforms: three cardinal slicing planes times
//! the eight-element dihedral group acting on the slice plane.
//!
//! A transform permutes voxels; the slicing axis of its plane is left in
//! place and each slice is rotated and/or flipped. 90° and 270° rotations
//! swap the two in-plane extents.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volio::{Contrast, Dims, Grid3, MultiContrastVolume, Voxel};

/// Cardinal plane used to cut 2D slices; the discriminant is the catalog block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Axial = 0,
    Sagittal = 1,
    Coronal = 2,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Sagittal, Plane::Coronal];

    /// Axis index (0 = x, 1 = y, 2 = z) perpendicular to the slices.
    pub fn slice_axis(self) -> usize {
        match self {
            Plane::Axial => 2,
            Plane::Sagittal => 0,
            Plane::Coronal => 1,
        }
    }

    /// In-plane axes `(a, b)`; `a` is the fast (width) axis of a 2D slice.
    pub fn in_plane_axes(self) -> (usize, usize) {
        match self {
            Plane::Axial => (0, 1),
            Plane::Sagittal => (1, 2),
            Plane::Coronal => (0, 2),
        }
    }

    pub fn extent(self, dims: Dims) -> usize {
        dims[self.slice_axis()]
    }

    /// 2D slice shape `(width, height)` for a volume of `dims`.
    pub fn slice_shape(self, dims: Dims) -> (usize, usize) {
        let (a, b) = self.in_plane_axes();
        (dims[a], dims[b])
    }

    fn voxel(self, u: usize, v: usize, s: usize) -> [usize; 3] {
        let mut p = [0; 3];
        let (a, b) = self.in_plane_axes();
        p[a] = u;
        p[b] = v;
        p[self.slice_axis()] = s;
        p
    }

    pub fn name(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Sagittal => "sagittal",
            Plane::Coronal => "coronal",
        }
    }
}

/// Element of D4 acting on a 2D slice: optional flip along the width axis
/// followed by `rot` counter-clockwise quarter turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dihedral {
    rot: u8,
    flip: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral { rot: 0, flip: false };

    pub fn new(rot: u8, flip: bool) -> Self {
        Self { rot: rot % 4, flip }
    }

    /// Catalog ordering: `id = rot + 4 * flip`.
    pub fn from_id(id: u8) -> Self {
        Self::new(id % 4, id / 4 % 2 == 1)
    }

    pub fn id(self) -> u8 {
        self.rot + 4 * self.flip as u8
    }

    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8).map(Dihedral::from_id)
    }

    pub fn rotation(self) -> u8 {
        self.rot
    }

    pub fn is_flip(self) -> bool {
        self.flip
    }

    pub fn inverse(self) -> Self {
        if self.flip {
            // reflections are involutions
            self
        } else {
            Self::new((4 - self.rot) % 4, false)
        }
    }

    /// `self.then(other)` applies `self` first, then `other`.
    pub fn then(self, other: Dihedral) -> Dihedral {
        // R^a F^f followed by R^b F^g; F R^b = R^-b F.
        if other.flip {
            Dihedral::new((other.rot + 4 - self.rot) % 4, !self.flip)
        } else {
            Dihedral::new((self.rot + other.rot) % 4, self.flip)
        }
    }

    pub fn swaps_axes(self) -> bool {
        self.rot % 2 == 1
    }

    /// Output shape for an input slice of `(width, height)`.
    pub fn out_shape(self, shape: (usize, usize)) -> (usize, usize) {
        if self.swaps_axes() { (shape.1, shape.0) } else { shape }
    }

    /// Destination coordinate of pixel `(u, v)` in a `(w, h)` slice.
    #[inline]
    pub fn map(self, u: usize, v: usize, (w, h): (usize, usize)) -> (usize, usize) {
        let (mut u, mut v, mut w, mut h) = (u, v, w, h);
        if self.flip {
            u = w - 1 - u;
        }
        for _ in 0..self.rot {
            // quarter turn counter-clockwise: +x goes to +y
            let nu = h - 1 - v;
            let nv = u;
            u = nu;
            v = nv;
            std::mem::swap(&mut w, &mut h);
        }
        (u, v)
    }

    /// Transforms a row-major `(w, h)` image (width fastest).
    pub fn apply_2d<T: Copy + Default>(self, data: &[T], shape: (usize, usize)) -> (Vec<T>, (usize, usize)) {
        let (w, h) = shape;
        assert_eq!(data.len(), w * h);
        let out_shape = self.out_shape(shape);
        let mut out = vec![T::default(); data.len()];
        for v in 0..h {
            for u in 0..w {
                let (du, dv) = self.map(u, v, shape);
                out[du + out_shape.0 * dv] = data[u + w * v];
            }
        }
        (out, out_shape)
    }

    /// Transforms a stack of `channels` images of `shape`, each laid out
    /// contiguously.
    pub fn apply_channels<T: Copy + Default>(
        self,
        data: &[T],
        channels: usize,
        shape: (usize, usize),
    ) -> (Vec<T>, (usize, usize)) {
        let plane = shape.0 * shape.1;
        assert_eq!(data.len(), channels * plane);
        let mut out = Vec::with_capacity(data.len());
        let mut out_shape = shape;
        for c in 0..channels {
            let (img, s) = self.apply_2d(&data[c * plane..(c + 1) * plane], shape);
            out.extend(img);
            out_shape = s;
        }
        (out, out_shape)
    }
}

/// One of the 24 multi-orientation transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OrientTransform {
    pub plane: Plane,
    pub dihedral: Dihedral,
}

impl OrientTransform {
    pub const COUNT: usize = 24;
    pub const IDENTITY: OrientTransform = OrientTransform { plane: Plane::Axial, dihedral: Dihedral::IDENTITY };

    pub fn new(plane: Plane, dihedral: Dihedral) -> Self {
        Self { plane, dihedral }
    }

    /// Stable id `plane * 8 + dihedral`.
    pub fn id(self) -> u8 {
        self.plane as u8 * 8 + self.dihedral.id()
    }

    pub fn from_id(id: u8) -> Result<Self> {
        if id as usize >= Self::COUNT {
            return Err(Error::Param(format!("transform id {id} outside 0..24")));
        }
        Ok(Self { plane: Plane::ALL[(id / 8) as usize], dihedral: Dihedral::from_id(id % 8) })
    }

    /// All 24 transforms in id order.
    pub fn catalog() -> Vec<OrientTransform> {
        (0..Self::COUNT as u8).map(|i| Self::from_id(i).unwrap()).collect()
    }

    /// The untransformed view of each cardinal plane.
    pub fn three_planes() -> Vec<OrientTransform> {
        Plane::ALL.iter().map(|&p| Self::new(p, Dihedral::IDENTITY)).collect()
    }

    pub fn inverse(self) -> Self {
        Self { plane: self.plane, dihedral: self.dihedral.inverse() }
    }

    /// Composition of two transforms that share a plane (`self` first).
    pub fn then(self, other: OrientTransform) -> Option<OrientTransform> {
        (self.plane == other.plane).then(|| Self::new(self.plane, self.dihedral.then(other.dihedral)))
    }

    pub fn out_dims(self, dims: Dims) -> Dims {
        let (a, b) = self.plane.in_plane_axes();
        let mut out = dims;
        if self.dihedral.swaps_axes() {
            out.swap(a, b);
        }
        out
    }

    /// Permutes the voxels of `grid`; values are moved, never interpolated.
    pub fn apply<T: Voxel>(self, grid: &Grid3<T>) -> Grid3<T> {
        let dims = grid.dims();
        let out_dims = self.out_dims(dims);
        let (a, b) = self.plane.in_plane_axes();
        let shape = (dims[a], dims[b]);
        let mut spacing = grid.spacing();
        if self.dihedral.swaps_axes() {
            spacing.swap(a, b);
        }
        let mut out = vec![T::default(); grid.len()];
        let src = grid.data();
        for s in 0..self.plane.extent(dims) {
            for v in 0..shape.1 {
                for u in 0..shape.0 {
                    let (du, dv) = self.dihedral.map(u, v, shape);
                    let p = self.plane.voxel(u, v, s);
                    let q = self.plane.voxel(du, dv, s);
                    out[q[0] + out_dims[0] * (q[1] + out_dims[1] * q[2])] =
                        src[p[0] + dims[0] * (p[1] + dims[1] * p[2])];
                }
            }
        }
        Grid3::from_raw_parts(out_dims, spacing, out)
    }
}

/// Copies slice `index` of `grid` cut in `plane` into a `(width, height)` image.
pub fn extract_slice<T: Voxel>(grid: &Grid3<T>, plane: Plane, index: usize) -> Vec<T> {
    let dims = grid.dims();
    let (w, h) = plane.slice_shape(dims);
    let mut out = Vec::with_capacity(w * h);
    for v in 0..h {
        for u in 0..w {
            let [x, y, z] = plane.voxel(u, v, index);
            out.push(grid.get(x, y, z));
        }
    }
    out
}

/// Writes a `(width, height)` image into slice `index` of `grid`.
pub fn insert_slice<T: Voxel>(grid: &mut Grid3<T>, plane: Plane, index: usize, slice: &[T]) {
    let (w, h) = plane.slice_shape(grid.dims());
    assert_eq!(slice.len(), w * h);
    for v in 0..h {
        for u in 0..w {
            let [x, y, z] = plane.voxel(u, v, index);
            grid.set(x, y, z, slice[u + w * v]);
        }
    }
}

/// Three adjacent slices per contrast around `center_index`, stacked on the
/// channel axis as `3 * contrast + (offset + 1)` for offsets −1, 0, +1.
#[derive(Debug, Clone, PartialEq)]
pub struct Slab25D {
    pub center_index: usize,
    pub plane: Plane,
    /// `(width, height)` of each channel image.
    pub shape: (usize, usize),
    pub channels: Vec<f32>,
    pub availability: crate::volio::Availability,
}

impl Slab25D {
    pub const N_CHANNELS: usize = 3 * Contrast::ALL.len();

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.shape.0 * self.shape.1;
        &self.channels[c * n..(c + 1) * n]
    }

    /// Rotates/flips every channel image.
    pub fn transformed(&self, d: Dihedral) -> Slab25D {
        let (channels, shape) = d.apply_channels(&self.channels, Self::N_CHANNELS, self.shape);
        Slab25D { shape, channels, ..self.clone() }
    }
}

/// Builds the 2.5D slab centred on `index`, zero-padding beyond the volume
/// and zero-filling absent contrasts.
pub fn extract_slab(mcv: &MultiContrastVolume, plane: Plane, index: usize) -> Result<Slab25D> {
    let dims = mcv.dims();
    let extent = plane.extent(dims);
    if index >= extent {
        return Err(Error::Param(format!("slice index {index} outside 0..{extent} for {} plane", plane.name())));
    }
    let shape = plane.slice_shape(dims);
    let n = shape.0 * shape.1;
    let mut channels = vec![0.0f32; Slab25D::N_CHANNELS * n];
    for c in Contrast::ALL {
        let Some(vol) = mcv.get(c) else { continue };
        for (k, off) in [-1i64, 0, 1].into_iter().enumerate() {
            let s = index as i64 + off;
            if s < 0 || s >= extent as i64 {
                continue;
            }
            let img = extract_slice(vol, plane, s as usize);
            let ch = 3 * c.index() + k;
            channels[ch * n..(ch + 1) * n].copy_from_slice(&img);
        }
    }
    Ok(Slab25D { center_index: index, plane, shape, channels, availability: mcv.availability() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volio::Volume3D;

    fn ramp(dims: Dims) -> Volume3D {
        Volume3D::from_fn(dims, |x, y, z| (x + 7 * y + 59 * z) as f32)
    }

    #[test]
    fn identity_is_exact() {
        let v = ramp([3, 4, 5]);
        assert_eq!(OrientTransform::IDENTITY.apply(&v), v);
    }

    #[test]
    fn rot90_twice_is_rot180() {
        let v = ramp([5, 6, 7]);
        for plane in Plane::ALL {
            let r90 = OrientTransform::new(plane, Dihedral::new(1, false));
            let r180 = OrientTransform::new(plane, Dihedral::new(2, false));
            assert_eq!(r90.apply(&r90.apply(&v)), r180.apply(&v));
        }
    }

    #[test]
    fn inverse_of_rot90_is_rot270() {
        assert_eq!(Dihedral::new(1, false).inverse(), Dihedral::new(3, false));
        assert_eq!(OrientTransform::IDENTITY.inverse(), OrientTransform::IDENTITY);
    }

    #[test]
    fn catalog_ids_are_stable() {
        let cat = OrientTransform::catalog();
        assert_eq!(cat.len(), 24);
        for (i, t) in cat.iter().enumerate() {
            assert_eq!(t.id() as usize, i);
        }
        assert_eq!(cat[8].plane, Plane::Sagittal);
        assert_eq!(cat[16].plane, Plane::Coronal);
        assert!(OrientTransform::from_id(24).is_err());
    }

    #[test]
    fn slab_boundary_is_zero_padded() {
        let v = ramp([4, 4, 4]).map(|x| x + 1.0);
        let mcv = MultiContrastVolume::from_pairs([(Contrast::T1w, v.clone()), (Contrast::T2w, v)]).unwrap();
        let slab = extract_slab(&mcv, Plane::Axial, 0).unwrap();
        assert!(slab.channel(0).iter().all(|&x| x == 0.0));
        assert!(slab.channel(1).iter().all(|&x| x != 0.0));
        // FLAIR absent: all three channels zero
        for c in 9..12 {
            assert!(slab.channel(c).iter().all(|&x| x == 0.0));
        }
        assert!(extract_slab(&mcv, Plane::Axial, 4).is_err());
    }

    #[test]
    fn middle_slab_matches_direct_slicing() {
        let v = ramp([5, 6, 7]);
        let mcv = MultiContrastVolume::from_pairs([(Contrast::Flair, v.clone())]).unwrap();
        for plane in Plane::ALL {
            let mid = plane.extent(v.dims()) / 2;
            let slab = extract_slab(&mcv, plane, mid).unwrap();
            let (w, h) = plane.slice_shape(v.dims());
            for (k, s) in [mid - 1, mid, mid + 1].into_iter().enumerate() {
                let ch = slab.channel(9 + k);
                for vv in 0..h {
                    for u in 0..w {
                        let mut p = [0; 3];
                        let (a, b) = plane.in_plane_axes();
                        p[a] = u;
                        p[b] = vv;
                        p[plane.slice_axis()] = s;
                        assert_eq!(ch[u + w * vv], v.get(p[0], p[1], p[2]));
                    }
                }
            }
        }
    }
}
