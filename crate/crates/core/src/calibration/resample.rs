//! Resampling volumes and masks onto an axis-aligned grid of the calibrated frame.

use nalgebra::Vector3;

use super::CalibrationError;
use crate::geometry::RigidPose;
use crate::volume::{Grid, LabelMask, Volume};

pub const DEFAULT_SPACING_MM: f64 = 0.5;
/// Extra voxels on every side of the transformed bounding box.
pub const PAD_VOXELS: usize = 2;
const MAX_OUTPUT_VOXELS: usize = 1 << 28;
const TIE_TOL: f64 = 1e-6;

/// Isotropic output grid covering the transformed input, symmetric about the
/// calibrated origin on every axis with a voxel center at the origin, so
/// mirroring about `x = 0` maps voxels onto voxels.
pub fn calibrated_grid(input: &Grid, pose: &RigidPose, spacing: f64) -> Result<Grid, CalibrationError> {
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(CalibrationError::InvalidParameter(format!("spacing must be positive, got {spacing}")));
    }
    let [nx, ny, nz] = input.dims.map(|n| (n - 1) as f64);
    let mut half = Vector3::<f64>::zeros();
    for corner in 0..8 {
        let idx = [
            if corner & 1 != 0 { nx } else { 0.0 },
            if corner & 2 != 0 { ny } else { 0.0 },
            if corner & 4 != 0 { nz } else { 0.0 },
        ];
        let q = pose.apply(&input.world(idx));
        half = half.zip_map(&q, |h, v| h.max(v.abs()));
    }
    let dims = [0, 1, 2].map(|a| 2 * ((half[a] / spacing - 1e-9).ceil().max(0.0) as usize + PAD_VOXELS) + 1);
    if dims.iter().product::<usize>() > MAX_OUTPUT_VOXELS {
        return Err(CalibrationError::InvalidParameter(format!("calibrated grid {dims:?} is too large")));
    }
    let s = spacing as f32;
    let origin = dims.map(|n| -((n - 1) as f32 / 2.0) * s);
    Ok(Grid::new(dims, [s; 3], origin)?)
}

/// Continuous input index for every output voxel, in output linear order.
fn for_each_source(out: &Grid, input: &Grid, pose: &RigidPose, mut f: impl FnMut([f64; 3])) {
    let inv = pose.inverse();
    let [nx, ny, nz] = out.dims;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let p = inv.apply(&out.world_of([i, j, k]));
                f(input.index_of(&p));
            }
        }
    }
}

/// Trilinear resampling of `vol` under the world → calibrated `pose`.
/// Samples outside the input take its minimum (air) value.
pub fn resample(vol: &Volume, pose: &RigidPose, spacing: f64) -> Result<Volume, CalibrationError> {
    let out = calibrated_grid(vol.grid(), pose, spacing)?;
    resample_onto(vol, pose, &out)
}

pub fn resample_onto(vol: &Volume, pose: &RigidPose, out: &Grid) -> Result<Volume, CalibrationError> {
    let air = vol.min_value();
    let mut voxels = Vec::with_capacity(out.len());
    for_each_source(out, vol.grid(), pose, |idx| voxels.push(vol.sample_trilinear(idx).unwrap_or(air)));
    Ok(Volume::new(*out, voxels)?)
}

/// Nearest-neighbor resampling of a mask; outside the input is background.
pub fn resample_mask(mask: &LabelMask, pose: &RigidPose, spacing: f64) -> Result<LabelMask, CalibrationError> {
    let out = calibrated_grid(mask.grid(), pose, spacing)?;
    resample_mask_onto(mask, pose, &out)
}

/// Rounds to the nearest index; half-way ties go toward the grid center so a
/// mask symmetric about the center stays symmetric.
fn nearest(x: f64, n: usize) -> i64 {
    let fl = x.floor();
    if (x - fl - 0.5).abs() < TIE_TOL {
        let center = (n as f64 - 1.0) / 2.0;
        return if fl + 0.5 < center { fl as i64 + 1 } else { fl as i64 };
    }
    x.round() as i64
}

pub fn resample_mask_onto(mask: &LabelMask, pose: &RigidPose, out: &Grid) -> Result<LabelMask, CalibrationError> {
    let input = mask.grid();
    let mut labels = Vec::with_capacity(out.len());
    for_each_source(out, input, pose, |idx| {
        let n = [0, 1, 2].map(|a| nearest(idx[a], input.dims[a]));
        labels.push(if input.contains(n) { mask.get(n[0] as usize, n[1] as usize, n[2] as usize) } else { 0 });
    });
    Ok(LabelMask::new(*out, labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_symmetric_and_padded() {
        let input = Grid::new([11, 5, 3], [0.5; 3], [-2.5, -1.0, -0.5]).unwrap();
        let g = calibrated_grid(&input, &RigidPose::identity(), 0.5).unwrap();
        assert_eq!(g.dims, [15, 9, 7]);
        assert_eq!(g.world_of([7, 4, 3]), Vector3::zeros());
        assert!(calibrated_grid(&input, &RigidPose::identity(), 0.0).is_err());
    }

    #[test]
    fn identity_resample_reproduces_lattice() {
        let grid = Grid::new([6, 5, 4], [0.5; 3], [-1.5, -1.0, -0.5]).unwrap();
        let vals: Vec<f32> = (0..grid.len()).map(|i| (i as f32 * 0.37).sin()).collect();
        let vol = Volume::new(grid, vals).unwrap();
        let out = resample(&vol, &RigidPose::identity(), 0.5).unwrap();
        for k in 0..4 {
            for j in 0..5 {
                for i in 0..6 {
                    let idx = out.grid().index_of(&grid.world_of([i, j, k])).map(|x| x.round() as usize);
                    assert!((out.get(idx[0], idx[1], idx[2]) - vol.get(i, j, k)).abs() < 1e-6);
                }
            }
        }
        assert_eq!(out.get(0, 0, 0), vol.min_value());
    }

    #[test]
    fn nearest_ties_go_to_center() {
        assert_eq!(nearest(2.5, 11), 3);
        assert_eq!(nearest(6.5, 11), 6);
        assert_eq!(nearest(4.5, 10), 4);
        assert_eq!(nearest(2.4, 11), 2);
        assert_eq!(nearest(-0.5, 11), 0);
    }

    #[test]
    fn constant_volume_stays_constant_inside() {
        let grid = Grid::new([9, 9, 9], [1.0; 3], [-4.0; 3]).unwrap();
        let vol = Volume::filled(grid, 7.0);
        let pose = RigidPose::from_euler_deg(10.0, -5.0, 20.0, Vector3::new(0.3, 0.0, -0.2));
        let out = resample(&vol, &pose, 0.7).unwrap();
        let c = out.grid().index_of(&Vector3::zeros()).map(|x| x.round() as usize);
        assert_eq!(out.get(c[0], c[1], c[2]), 7.0);
        assert!(out.voxels().iter().all(|&v| v == 7.0));
    }
}
