//! Independent reference implementations and random fixtures shared by the
//! integration tests and the acceptance runner.

#![allow(dead_code)]

use std::collections::VecDeque;

use msseg_core::{BinaryMask3D, ConfidenceMap, Dims, Grid3, Volume3D};
use rand::Rng;

pub fn random_mask(rng: &mut impl Rng, dims: Dims, density: f64) -> BinaryMask3D {
    Grid3::from_fn(dims, |_, _, _| rng.random_bool(density))
}

pub fn random_volume(rng: &mut impl Rng, dims: Dims) -> Volume3D {
    Grid3::from_fn(dims, |_, _, _| rng.random_range(-1000.0f32..1000.0))
}

/// Blob-shaped vote counts: a few random balls, each adding votes that fall
/// off with distance, plus sparse noise votes.
pub fn random_confidence(rng: &mut impl Rng, dims: Dims, n_votes: u16) -> ConfidenceMap {
    let mut counts = Grid3::<u16>::filled(dims, 0);
    let blobs = rng.random_range(1..6);
    for _ in 0..blobs {
        let c = [0, 1, 2].map(|a| rng.random_range(0..dims[a]) as f64);
        let r = rng.random_range(1.0..4.0);
        let peak = rng.random_range(1..=n_votes) as f64;
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let d = ((x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (z as f64 - c[2]).powi(2)).sqrt();
                    if d <= r {
                        let add = (peak * (1.0 - d / (r + 1.0))).round() as u16;
                        let v = counts.get(x, y, z).saturating_add(add).min(n_votes);
                        counts.set(x, y, z, v);
                    }
                }
            }
        }
    }
    for v in counts.data_mut() {
        if rng.random_bool(0.02) {
            *v = (*v + rng.random_range(0..=n_votes)).min(n_votes);
        }
    }
    ConfidenceMap::from_counts(counts, n_votes).expect("counts within range")
}

/// 26-neighbours of a voxel, clipped to the grid.
fn neighbours(dims: Dims, [x, y, z]: [usize; 3]) -> Vec<[usize; 3]> {
    let mut out = Vec::with_capacity(26);
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                if (dx, dy, dz) == (0, 0, 0) {
                    continue;
                }
                let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                if nx >= 0 && ny >= 0 && nz >= 0 && nx < dims[0] as i64 && ny < dims[1] as i64 && nz < dims[2] as i64 {
                    out.push([nx as usize, ny as usize, nz as usize]);
                }
            }
        }
    }
    out
}

/// Iterative growth: start from `m1` and repeatedly add every `m2` voxel
/// adjacent to the grown set until nothing changes.
pub fn bfs_grow(m1: &BinaryMask3D, m2: &BinaryMask3D) -> BinaryMask3D {
    let dims = m1.dims();
    let mut out = BinaryMask3D::empty(dims);
    let mut queue = VecDeque::new();
    for i in 0..m1.len() {
        if m1.data()[i] {
            out.data_mut()[i] = true;
            queue.push_back(m1.coords(i));
        }
    }
    while let Some(p) = queue.pop_front() {
        for q in neighbours(dims, p) {
            let (x, y, z) = (q[0], q[1], q[2]);
            if m2.get(x, y, z) && !out.get(x, y, z) {
                out.set(x, y, z, true);
                queue.push_back(q);
            }
        }
    }
    out
}

/// Components as voxel lists, found by flood fill.
pub fn flood_components(mask: &BinaryMask3D) -> Vec<Vec<usize>> {
    let dims = mask.dims();
    let mut seen = vec![false; mask.len()];
    let mut comps = Vec::new();
    for start in 0..mask.len() {
        if !mask.data()[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut comp = vec![start];
        let mut queue = VecDeque::from([mask.coords(start)]);
        while let Some(p) = queue.pop_front() {
            for q in neighbours(dims, p) {
                let i = mask.index(q[0], q[1], q[2]);
                if mask.data()[i] && !seen[i] {
                    seen[i] = true;
                    comp.push(i);
                    queue.push_back(q);
                }
            }
        }
        comps.push(comp);
    }
    comps
}

/// `(dsc, ppv, tpr)` by counting, with 1.0 for every empty denominator.
pub fn brute_voxel(pred: &BinaryMask3D, gt: &BinaryMask3D) -> (f64, f64, f64) {
    let both = |i: usize| pred.data()[i] && gt.data()[i];
    let tp = (0..pred.len()).filter(|&i| both(i)).count();
    let np = pred.data().iter().filter(|&&b| b).count();
    let ng = gt.data().iter().filter(|&&b| b).count();
    let div = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    (div(2 * tp, np + ng), div(tp, np), div(tp, ng))
}

/// `(ltpr, lfpr)`: a component is matched when any of its voxels is set in
/// the other mask. LTPR is 1 without reference lesions, LFPR 0 without
/// predicted lesions.
pub fn brute_lesion(pred: &BinaryMask3D, gt: &BinaryMask3D) -> (f64, f64) {
    let gt_c = flood_components(gt);
    let pred_c = flood_components(pred);
    let detected = gt_c.iter().filter(|c| c.iter().any(|&i| pred.data()[i])).count();
    let false_pos = pred_c.iter().filter(|c| !c.iter().any(|&i| gt.data()[i])).count();
    let ltpr = if gt_c.is_empty() { 1.0 } else { detected as f64 / gt_c.len() as f64 };
    let lfpr = if pred_c.is_empty() { 0.0 } else { false_pos as f64 / pred_c.len() as f64 };
    (ltpr, lfpr)
}
