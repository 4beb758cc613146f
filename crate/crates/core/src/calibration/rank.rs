//! Quality rank of a calibrated mask.

use serde::{Deserialize, Serialize};

use super::components::split_components;
use crate::losses::dsc_labels;
use crate::volume::LabelMask;

/// Largest acceptable axial centroid gap between the two canals, slices.
pub const MAX_CENTROID_GAP_SLICES: f64 = 1.0;
/// Smallest acceptable Dice between the mask and its mirror image.
pub const MIN_MIRROR_DSC: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rank {
    /// Same axial slices and symmetric.
    Excellent,
    /// Same axial slices, not fully symmetric.
    Good,
    /// Not in the same axial slices.
    Failed,
}

impl std::fmt::Display for Rank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Rank::Excellent => "Excellent",
            Rank::Good => "Good",
            Rank::Failed => "Failed",
        })
    }
}

/// Measurements behind a rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankDetails {
    pub rank: Rank,
    /// Inclusive axial index ranges of the left and right canal.
    pub z_ranges: Option<[[usize; 2]; 2]>,
    pub ranges_overlap: bool,
    /// Axial distance between the canal centroids, slices.
    pub centroid_gap_slices: Option<f64>,
    /// Dice of the mask against its reflection about `x = 0`.
    pub mirror_dsc: Option<f64>,
}

/// Reflection of a mask about the world plane `x = 0`; voxels whose mirror
/// falls outside the grid are dropped.
pub fn mirror_x(mask: &LabelMask) -> LabelMask {
    let grid = *mask.grid();
    let mut out = LabelMask::empty(grid);
    for [i, j, k] in mask.foreground() {
        let mut p = grid.world_of([i, j, k]);
        p.x = -p.x;
        let m = grid.index_of(&p).map(|x| x.round() as i64);
        if grid.contains(m) {
            out.set(m[0] as usize, m[1] as usize, m[2] as usize, true);
        }
    }
    out
}

pub fn mirror_dsc(mask: &LabelMask) -> f64 {
    dsc_labels(mask.labels(), mirror_x(mask).labels())
}

/// Ranks a mask already resampled into the calibrated frame.
pub fn rank_result(mask: &LabelMask, min_component: usize) -> RankDetails {
    let failed = RankDetails {
        rank: Rank::Failed,
        z_ranges: None,
        ranges_overlap: false,
        centroid_gap_slices: None,
        mirror_dsc: None,
    };
    let Ok((left, right)) = split_components(mask, min_component) else {
        return failed;
    };
    let range = |c: &super::Component| {
        let lo = c.voxels.iter().map(|v| v[2]).min().unwrap();
        let hi = c.voxels.iter().map(|v| v[2]).max().unwrap();
        [lo, hi]
    };
    let mean_k = |c: &super::Component| c.voxels.iter().map(|v| v[2] as f64).sum::<f64>() / c.len() as f64;
    let (rl, rr) = (range(&left), range(&right));
    let overlap = rl[0].max(rr[0]) <= rl[1].min(rr[1]);
    let gap = (mean_k(&left) - mean_k(&right)).abs();
    let mirror = mirror_dsc(mask);
    let rank = if !overlap {
        Rank::Failed
    } else if gap <= MAX_CENTROID_GAP_SLICES && mirror >= MIN_MIRROR_DSC {
        Rank::Excellent
    } else {
        Rank::Good
    };
    RankDetails {
        rank,
        z_ranges: Some([rl, rr]),
        ranges_overlap: overlap,
        centroid_gap_slices: Some(gap),
        mirror_dsc: Some(mirror),
    }
}
