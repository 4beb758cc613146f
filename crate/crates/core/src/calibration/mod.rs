//! Mask-driven geometric calibration.
//!
//! The two largest canal components give extremal anchors `P1` (left) and
//! `P2` (right). Their midpoint `P0` and direction define the mid-sagittal
//! plane, refined by re-selecting the anchors along the current axis until the
//! axis change moves the farther anchor by less than `L0`. A least-squares
//! plane through all canal voxels gives the LSC plane; together they fix a
//! right-handed frame and the rigid world → calibrated transform. The volume
//! and mask are then resampled on an isotropic grid of that frame.

mod components;
mod frame;
mod rank;
mod resample;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::RigidPose;
use crate::volume::{LabelMask, Volume, VolumeError};

pub use components::{connected_components, keep_largest, split_components, Component, MIN_COMPONENT_VOXELS};
pub use frame::{
    build_frame, center_origin, circle_center, decompose_normal, estimate_transform, find_anchors, fit_lsc_plane, refine_sagittal, refine_sagittal_banded, find_anchor_faces, CalibrationFrame,
    Decomposition, PlaneFit, SagittalFit, DEFAULT_L0_MM, DEFAULT_MAX_ITER,
};
pub const DEFAULT_ANCHOR_BAND_MM: f64 = 1.0;

pub use rank::{mirror_dsc, mirror_x, rank_result, Rank, RankDetails, MAX_CENTROID_GAP_SLICES, MIN_MIRROR_DSC};
pub use resample::{
    calibrated_grid, resample, resample_mask, resample_mask_onto, resample_onto, DEFAULT_SPACING_MM, PAD_VOXELS,
};

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("empty mask: no foreground voxels")]
    EmptyMask,
    #[error("insufficient anchors: found {found} component(s) with at least {min_size} voxels, need 2")]
    InsufficientAnchors { found: usize, min_size: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub l0_mm: f64,
    pub max_iter: usize,
    pub spacing_mm: f64,
    pub min_component: usize,
    /// Anchor face thickness, mm; 0 keeps single-voxel anchors.
    pub anchor_band_mm: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            l0_mm: DEFAULT_L0_MM,
            max_iter: DEFAULT_MAX_ITER,
            spacing_mm: DEFAULT_SPACING_MM,
            min_component: MIN_COMPONENT_VOXELS,
            anchor_band_mm: DEFAULT_ANCHOR_BAND_MM,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<(), CalibrationError> {
        if !(self.l0_mm > 0.0) {
            return Err(CalibrationError::InvalidParameter(format!("l0_mm must be positive, got {}", self.l0_mm)));
        }
        if self.max_iter == 0 {
            return Err(CalibrationError::InvalidParameter("max_iter must be at least 1".into()));
        }
        if !(self.spacing_mm > 0.0 && self.spacing_mm.is_finite()) {
            return Err(CalibrationError::InvalidParameter(format!(
                "spacing_mm must be positive, got {}",
                self.spacing_mm
            )));
        }
        if !(self.anchor_band_mm >= 0.0 && self.anchor_band_mm.is_finite()) {
            return Err(CalibrationError::InvalidParameter(format!(
                "anchor_band_mm must be non-negative, got {}",
                self.anchor_band_mm
            )));
        }
        if self.min_component == 0 {
            return Err(CalibrationError::InvalidParameter("min_component must be at least 1".into()));
        }
        Ok(())
    }
}

/// Summary of one calibration run, serialized as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub iterations: usize,
    pub l1_mm: f64,
    pub l0_mm: f64,
    pub p1: [f64; 3],
    pub p2: [f64; 3],
    pub rms_mm: f64,
    /// Euler angles `(x, y, z)` of the world → calibrated rotation, degrees.
    pub angles_deg: [f64; 3],
    pub rank: Rank,
    pub converged: bool,
    pub p0: [f64; 3],
    /// Frame origin: `P0` moved within the mid-sagittal plane to the canal center.
    pub origin: [f64; 3],
    pub decomposition: Option<Decomposition>,
    pub ranges_overlap: bool,
    pub centroid_gap_slices: Option<f64>,
    pub mirror_dsc: Option<f64>,
    pub failure: Option<String>,
}

impl CalibrationReport {
    /// Report for a run that stopped before a frame was found.
    pub fn failed(l0_mm: f64, reason: impl Into<String>) -> Self {
        Self {
            iterations: 0,
            l1_mm: f64::NAN,
            l0_mm,
            p1: [f64::NAN; 3],
            p2: [f64::NAN; 3],
            rms_mm: f64::NAN,
            angles_deg: [f64::NAN; 3],
            rank: Rank::Failed,
            converged: false,
            p0: [f64::NAN; 3],
            origin: [f64::NAN; 3],
            decomposition: None,
            ranges_overlap: false,
            centroid_gap_slices: None,
            mirror_dsc: None,
            failure: Some(reason.into()),
        }
    }

    /// Pretty JSON; non-finite numbers become `null`.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Everything produced by [`calibrate`].
#[derive(Debug, Clone)]
pub struct Calibration {
    pub volume: Volume,
    pub mask: LabelMask,
    pub pose: RigidPose,
    pub frame: CalibrationFrame,
    pub report: CalibrationReport,
}

fn arr(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// Frame estimation only: split, refine, plane fit, frame and transform.
pub fn estimate_frame(
    mask: &LabelMask,
    cfg: &CalibrationConfig,
) -> Result<(CalibrationFrame, RigidPose, SagittalFit, PlaneFit), CalibrationError> {
    cfg.validate()?;
    let (left, right) = split_components(mask, cfg.min_component)?;
    let grid = mask.grid();
    let (lp, rp) = (left.world_points(grid), right.world_points(grid));
    let sag = refine_sagittal_banded(&lp, &rp, cfg.l0_mm, cfg.max_iter, cfg.anchor_band_mm)?;
    let all: Vec<Vector3<f64>> = lp.iter().chain(rp.iter()).copied().collect();
    let plane = fit_lsc_plane(&all, &sag.x_axis)?;
    let mut frame = build_frame(sag.p0, sag.x_axis, plane.z_axis, (sag.p1, sag.p2))?;
    frame.origin = center_origin(&frame, &lp, &rp);
    let pose = estimate_transform(&frame);
    Ok((frame, pose, sag, plane))
}

/// Full calibration of `vol` driven by the canal `mask` on the same grid.
pub fn calibrate(vol: &Volume, mask: &LabelMask, cfg: &CalibrationConfig) -> Result<Calibration, CalibrationError> {
    mask.ensure_congruent(vol.grid())?;
    let (frame, pose, sag, plane) = estimate_frame(mask, cfg)?;
    let out_grid = calibrated_grid(vol.grid(), &pose, cfg.spacing_mm)?;
    let volume = resample_onto(vol, &pose, &out_grid)?;
    let cal_mask = resample_mask_onto(mask, &pose, &out_grid)?;
    let details = rank_result(&cal_mask, cfg.min_component);
    let report = CalibrationReport {
        iterations: sag.iterations,
        l1_mm: sag.l1_mm,
        l0_mm: cfg.l0_mm,
        p1: arr(&sag.p1),
        p2: arr(&sag.p2),
        rms_mm: plane.rms_mm,
        angles_deg: pose.euler_deg(),
        rank: details.rank,
        converged: sag.converged,
        p0: arr(&sag.p0),
        origin: arr(&frame.origin),
        decomposition: Some(decompose_normal(&frame.x_axis)),
        ranges_overlap: details.ranges_overlap,
        centroid_gap_slices: details.centroid_gap_slices,
        mirror_dsc: details.mirror_dsc,
        failure: None,
    };
    Ok(Calibration { volume, mask: cal_mask, pose, frame, report })
}

/// Rotation (degrees) and translation (mm) left over after composing the
/// estimated world → calibrated pose with the true canonical → world pose.
pub fn pose_error(estimated: &RigidPose, truth: &RigidPose) -> (f64, f64) {
    let residual = estimated.compose(truth);
    (residual.rotation_angle_deg(), residual.translation.norm())
}
