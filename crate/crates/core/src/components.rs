//! 26-connected component labeling of binary masks (two-pass union-find).

use crate::volio::{BinaryMask3D, Grid3};

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn new() -> Self {
        // label 0 is background
        Self { parent: vec![0] }
    }

    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) -> u32 {
        let (ra, rb) = (self.find(a), self.find(b));
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi as usize] = lo;
        lo
    }
}

/// Labeled components: `labels[i] == 0` for background, otherwise `1..=count`
/// numbered in raster order of each component's first voxel.
#[derive(Debug, Clone)]
pub struct Components {
    pub labels: Grid3<u32>,
    pub count: usize,
}

impl crate::volio::Voxel for u32 {}

impl Components {
    /// Voxel count per label (index 0 unused).
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count + 1];
        for &l in self.labels.data() {
            sizes[l as usize] += 1;
        }
        sizes
    }

    /// Flags for each label touched by any voxel of `mask` (index 0 unused).
    pub fn touched_by(&self, mask: &BinaryMask3D) -> Vec<bool> {
        let mut hit = vec![false; self.count + 1];
        for (&l, &m) in self.labels.data().iter().zip(mask.data()) {
            if m && l != 0 {
                hit[l as usize] = true;
            }
        }
        hit
    }
}

/// Labels the 26-connected components of `mask`.
pub fn label_26(mask: &BinaryMask3D) -> Components {
    let [nx, ny, nz] = mask.dims();
    let data = mask.data();
    let mut labels = vec![0u32; data.len()];
    let mut ds = DisjointSet::new();
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);

    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = idx(x, y, z);
                if !data[i] {
                    continue;
                }
                let mut current = 0u32;
                // the 13 neighbours that precede (x, y, z) in raster order
                for dz in -1i64..=0 {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            if dz == 0 && (dy > 0 || (dy == 0 && dx >= 0)) {
                                continue;
                            }
                            let (qx, qy, qz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                            if qx < 0 || qy < 0 || qz < 0 || qx >= nx as i64 || qy >= ny as i64 {
                                continue;
                            }
                            let l = labels[idx(qx as usize, qy as usize, qz as usize)];
                            if l != 0 {
                                current = if current == 0 { l } else { ds.union(current, l) };
                            }
                        }
                    }
                }
                labels[i] = if current == 0 { ds.make() } else { current };
            }
        }
    }

    let mut remap = vec![0u32; ds.parent.len()];
    let mut count = 0u32;
    for l in labels.iter_mut() {
        if *l == 0 {
            continue;
        }
        let root = ds.find(*l) as usize;
        if remap[root] == 0 {
            count += 1;
            remap[root] = count;
        }
        *l = remap[root];
    }
    Components { labels: Grid3::from_raw_parts(mask.dims(), mask.spacing(), labels), count: count as usize }
}
