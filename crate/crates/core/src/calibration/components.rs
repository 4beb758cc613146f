//! 26-connected component labeling of binary masks.

use std::collections::VecDeque;

use nalgebra::Vector3;

use super::CalibrationError;
use crate::volume::{Grid, LabelMask};

/// Components smaller than this are treated as segmentation debris.
pub const MIN_COMPONENT_VOXELS: usize = 20;

/// A connected set of foreground voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    /// Voxel indices in increasing linear order.
    pub voxels: Vec<[usize; 3]>,
    /// Mean world coordinate of the voxel centers.
    pub centroid: Vector3<f64>,
}

impl Component {
    fn new(grid: &Grid, mut voxels: Vec<[usize; 3]>) -> Self {
        voxels.sort_unstable_by_key(|v| (v[2], v[1], v[0]));
        let sum = voxels.iter().fold(Vector3::zeros(), |acc, &v| acc + grid.world_of(v));
        let centroid = sum / voxels.len() as f64;
        Self { voxels, centroid }
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn world_points(&self, grid: &Grid) -> Vec<Vector3<f64>> {
        self.voxels.iter().map(|&v| grid.world_of(v)).collect()
    }
}

/// All 26-connected components, largest first; equal sizes keep scan order.
pub fn connected_components(mask: &LabelMask) -> Vec<Component> {
    let grid = *mask.grid();
    let [nx, ny, nz] = grid.dims;
    let labels = mask.labels();
    let mut seen = vec![false; labels.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..labels.len() {
        if labels[start] == 0 || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut voxels = Vec::new();
        while let Some(l) = queue.pop_front() {
            let [i, j, k] = grid.coords(l);
            voxels.push([i, j, k]);
            for dk in -1i64..=1 {
                for dj in -1i64..=1 {
                    for di in -1i64..=1 {
                        let (x, y, z) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                        if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 || z >= nz as i64 {
                            continue;
                        }
                        let n = grid.linear(x as usize, y as usize, z as usize);
                        if labels[n] != 0 && !seen[n] {
                            seen[n] = true;
                            queue.push_back(n);
                        }
                    }
                }
            }
        }
        out.push(Component::new(&grid, voxels));
    }
    // stable: ties keep discovery order
    out.sort_by_key(|c| std::cmp::Reverse(c.len()));
    out
}

/// The two largest components of at least `min_size` voxels, as (left, right)
/// by world-x centroid.
pub fn split_components(mask: &LabelMask, min_size: usize) -> Result<(Component, Component), CalibrationError> {
    if mask.count() == 0 {
        return Err(CalibrationError::EmptyMask);
    }
    let mut comps: Vec<Component> = connected_components(mask).into_iter().filter(|c| c.len() >= min_size).collect();
    if comps.len() < 2 {
        return Err(CalibrationError::InsufficientAnchors { found: comps.len(), min_size });
    }
    comps.truncate(2);
    let b = comps.pop().unwrap();
    let a = comps.pop().unwrap();
    Ok(if a.centroid.x <= b.centroid.x { (a, b) } else { (b, a) })
}

/// Mask keeping only the `keep` largest components.
pub fn keep_largest(mask: &LabelMask, keep: usize) -> LabelMask {
    let mut out = LabelMask::empty(*mask.grid());
    for c in connected_components(mask).into_iter().take(keep) {
        for [i, j, k] in c.voxels {
            out.set(i, j, k, true);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_with(dims: [usize; 3], on: &[[usize; 3]]) -> LabelMask {
        let mut m = LabelMask::empty(Grid::with_spacing(dims, [1.0; 3]).unwrap());
        for &[i, j, k] in on {
            m.set(i, j, k, true);
        }
        m
    }

    #[test]
    fn diagonal_neighbors_connect() {
        let m = mask_with([4, 4, 4], &[[0, 0, 0], [1, 1, 1], [3, 3, 3]]);
        let comps = connected_components(&m);
        assert_eq!(comps.len(), 2);
        assert_eq!(comps[0].len(), 2);
        assert_eq!(comps[1].voxels, vec![[3, 3, 3]]);
    }

    #[test]
    fn single_voxel_blobs_split_left_right() {
        let m = mask_with([41, 2, 2], &[[40, 1, 0], [1, 0, 1]]);
        let (l, r) = split_components(&m, 1).unwrap();
        assert_eq!(l.voxels, vec![[1, 0, 1]]);
        assert_eq!(r.voxels, vec![[40, 1, 0]]);
    }

    #[test]
    fn too_few_components() {
        let m = mask_with([8, 8, 8], &[[1, 1, 1], [2, 2, 2]]);
        assert!(matches!(
            split_components(&m, 1),
            Err(CalibrationError::InsufficientAnchors { found: 1, .. })
        ));
        let m = mask_with([41, 2, 2], &[[40, 1, 0], [1, 0, 1]]);
        assert!(matches!(
            split_components(&m, MIN_COMPONENT_VOXELS),
            Err(CalibrationError::InsufficientAnchors { found: 0, .. })
        ));
        assert!(matches!(split_components(&mask_with([2, 2, 2], &[]), 1), Err(CalibrationError::EmptyMask)));
    }

    #[test]
    fn keep_largest_drops_debris() {
        let m = mask_with([10, 3, 3], &[[0, 0, 0], [0, 1, 0], [0, 2, 0], [5, 0, 0], [9, 0, 0], [9, 1, 0]]);
        let kept = keep_largest(&m, 2);
        assert_eq!(kept.count(), 5);
        assert_eq!(kept.get(5, 0, 0), 0);
    }
}
