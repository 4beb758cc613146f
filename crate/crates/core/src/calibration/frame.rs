//! Anchor points, mid-sagittal refinement, LSC-plane fit and the calibrated frame.

use std::cmp::Ordering;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use super::CalibrationError;
use crate::geometry::{angle_between_deg, RigidPose};

/// Acceptable anchor displacement between iterations, mm.
pub const DEFAULT_L0_MM: f64 = 0.1;
pub const DEFAULT_MAX_ITER: usize = 50;
const ORTHO_TOL: f64 = 1e-9;

fn lex(a: &Vector3<f64>, b: &Vector3<f64>) -> Ordering {
    a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)).then(a.z.total_cmp(&b.z))
}

/// `P1` minimizes the projection onto `direction` over `left`, `P2` maximizes
/// it over `right`. Equal projections resolve to the lexicographically
/// smaller world point.
pub fn find_anchors(
    left: &[Vector3<f64>],
    right: &[Vector3<f64>],
    direction: &Vector3<f64>,
) -> Result<(Vector3<f64>, Vector3<f64>), CalibrationError> {
    let pick = |set: &[Vector3<f64>], sign: f64| {
        set.iter()
            .min_by(|a, b| (sign * a.dot(direction)).total_cmp(&(sign * b.dot(direction))).then(lex(a, b)))
            .copied()
    };
    match (pick(left, 1.0), pick(right, -1.0)) {
        (Some(p1), Some(p2)) => Ok((p1, p2)),
        _ => Err(CalibrationError::InsufficientAnchors { found: 0, min_size: 1 }),
    }
}

/// Sub-voxel anchors: centroids of the points whose projection onto
/// `direction` lies within `band` of the extremum found by [`find_anchors`].
pub fn find_anchor_faces(
    left: &[Vector3<f64>],
    right: &[Vector3<f64>],
    direction: &Vector3<f64>,
    band: f64,
) -> Result<(Vector3<f64>, Vector3<f64>), CalibrationError> {
    let (p1, p2) = find_anchors(left, right, direction)?;
    let face = |set: &[Vector3<f64>], ext: f64, sign: f64| {
        let (sum, n) = set
            .iter()
            .filter(|p| sign * (p.dot(direction) - ext) <= band)
            .fold((Vector3::zeros(), 0usize), |(s, n), p| (s + p, n + 1));
        sum / n as f64
    };
    Ok((face(left, p1.dot(direction), 1.0), face(right, p2.dot(direction), -1.0)))
}

/// Result of the mid-sagittal fixed-point iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SagittalFit {
    pub p0: Vector3<f64>,
    pub p1: Vector3<f64>,
    pub p2: Vector3<f64>,
    /// Unit normal of the mid-sagittal plane, pointing from `p1` to `p2`.
    pub x_axis: Vector3<f64>,
    pub iterations: usize,
    /// Displacement of the farther anchor caused by the last axis change, mm.
    pub l1_mm: f64,
    pub converged: bool,
}

/// Re-selects the anchors along the current axis until the axis change moves
/// the farther anchor by less than `l0_mm`. Starts from world `x`; returns the
/// iterate with the smallest `L1` when `max_iter` is exhausted.
pub fn refine_sagittal(
    left: &[Vector3<f64>],
    right: &[Vector3<f64>],
    l0_mm: f64,
    max_iter: usize,
) -> Result<SagittalFit, CalibrationError> {
    refine_sagittal_banded(left, right, l0_mm, max_iter, 0.0)
}

/// [`refine_sagittal`] with anchors averaged over a face of thickness `band`
/// (mm); `band = 0` uses the single extremal voxels.
pub fn refine_sagittal_banded(
    left: &[Vector3<f64>],
    right: &[Vector3<f64>],
    l0_mm: f64,
    max_iter: usize,
    band: f64,
) -> Result<SagittalFit, CalibrationError> {
    if !(l0_mm > 0.0) {
        return Err(CalibrationError::InvalidParameter(format!("L0 must be positive, got {l0_mm}")));
    }
    if max_iter == 0 {
        return Err(CalibrationError::InvalidParameter("max_iter must be at least 1".into()));
    }
    let mut d = Vector3::x();
    let mut best: Option<SagittalFit> = None;
    for it in 1..=max_iter {
        let (p1, p2) = if band > 0.0 { find_anchor_faces(left, right, &d, band)? } else { find_anchors(left, right, &d)? };
        let span = p2 - p1;
        if span.norm() == 0.0 {
            return Err(CalibrationError::Degenerate("anchors coincide".into()));
        }
        let next = span.normalize();
        let p0 = (p1 + p2) / 2.0;
        let reach = (p1 - p0).norm().max((p2 - p0).norm());
        let l1 = reach * angle_between_deg(&d, &next).to_radians();
        let fit = SagittalFit { p0, p1, p2, x_axis: next, iterations: it, l1_mm: l1, converged: l1 < l0_mm };
        if fit.converged {
            return Ok(fit);
        }
        if best.map_or(true, |b| l1 < b.l1_mm) {
            best = Some(fit);
        }
        d = next;
    }
    let mut best = best.expect("at least one iteration ran");
    best.iterations = max_iter;
    Ok(best)
}

/// Total-least-squares plane through the canal voxels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneFit {
    pub centroid: Vector3<f64>,
    /// Smallest-eigenvalue eigenvector of the covariance, before orthogonalization.
    pub normal: Vector3<f64>,
    /// Normal orthogonalized against the sagittal axis, positive world z.
    pub z_axis: Vector3<f64>,
    /// Root-mean-square point distance to the plane, mm.
    pub rms_mm: f64,
}

pub fn fit_lsc_plane(points: &[Vector3<f64>], x_axis: &Vector3<f64>) -> Result<PlaneFit, CalibrationError> {
    if points.len() < 3 {
        return Err(CalibrationError::Degenerate(format!("{} points cannot define a plane", points.len())));
    }
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (lo, mid, hi) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]);
    if mid <= 1e-12 * hi.max(1e-300) {
        return Err(CalibrationError::Degenerate("points are collinear".into()));
    }
    let normal: Vector3<f64> = eig.eigenvectors.column(order[0]).into_owned();
    let mut z = normal - x_axis * normal.dot(x_axis);
    if z.norm() < 1e-6 {
        return Err(CalibrationError::Degenerate("plane normal is parallel to the sagittal axis".into()));
    }
    z.normalize_mut();
    if z.z < 0.0 {
        z = -z;
    }
    Ok(PlaneFit { centroid, normal, z_axis: z, rms_mm: lo.max(0.0).sqrt() })
}

/// Origin and orthonormal axes of the calibrated coordinate system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationFrame {
    pub origin: Vector3<f64>,
    pub x_axis: Vector3<f64>,
    pub y_axis: Vector3<f64>,
    pub z_axis: Vector3<f64>,
    pub p1: Vector3<f64>,
    pub p2: Vector3<f64>,
}

impl CalibrationFrame {
    /// Columns are the frame axes.
    pub fn axes(&self) -> Matrix3<f64> {
        Matrix3::from_columns(&[self.x_axis, self.y_axis, self.z_axis])
    }

    pub fn is_orthonormal(&self) -> bool {
        let a = self.axes();
        (a.transpose() * a - Matrix3::identity()).abs().max() <= ORTHO_TOL
            && (self.x_axis.cross(&self.y_axis) - self.z_axis).abs().max() <= ORTHO_TOL
    }
}

/// Completes the frame with `y = z × x`.
pub fn build_frame(
    origin: Vector3<f64>,
    x_axis: Vector3<f64>,
    z_axis: Vector3<f64>,
    anchors: (Vector3<f64>, Vector3<f64>),
) -> Result<CalibrationFrame, CalibrationError> {
    let unit = |v: &Vector3<f64>| (v.norm() - 1.0).abs() <= 1e-6;
    if !unit(&x_axis) || !unit(&z_axis) {
        return Err(CalibrationError::Degenerate("frame axes must be unit vectors".into()));
    }
    if x_axis.dot(&z_axis).abs() > 1e-6 {
        return Err(CalibrationError::Degenerate("sagittal and LSC plane normals are not orthogonal".into()));
    }
    let x = x_axis.normalize();
    let z = (z_axis - x * z_axis.dot(&x)).normalize();
    let y = z.cross(&x);
    Ok(CalibrationFrame { origin, x_axis: x, y_axis: y, z_axis: z, p1: anchors.0, p2: anchors.1 })
}

/// Least-squares circle center of 2D points (algebraic fit); `None` when the
/// points are collinear.
pub fn circle_center(points: &[[f64; 2]]) -> Option<[f64; 2]> {
    let mut ata = Matrix3::<f64>::zeros();
    let mut atb = Vector3::<f64>::zeros();
    for &[u, v] in points {
        let row = Vector3::new(u, v, 1.0);
        ata += row * row.transpose();
        atb += row * -(u * u + v * v);
    }
    let sol = ata.lu().solve(&atb)?;
    let c = [-sol[0] / 2.0, -sol[1] / 2.0];
    c.iter().all(|x| x.is_finite()).then_some(c)
}

/// Moves the frame origin within the mid-sagittal plane to the canal center:
/// `y` from the mean of the two fitted canal circle centers, `z` from the
/// LSC-plane centroid. Falls back to the component centroid for a component
/// whose points are collinear in the plane.
pub fn center_origin(frame: &CalibrationFrame, left: &[Vector3<f64>], right: &[Vector3<f64>]) -> Vector3<f64> {
    let p0 = frame.origin;
    let local = |p: &Vector3<f64>| {
        let d = p - p0;
        [d.dot(&frame.x_axis), d.dot(&frame.y_axis), d.dot(&frame.z_axis)]
    };
    let center_v = |set: &[Vector3<f64>]| {
        let pts: Vec<[f64; 3]> = set.iter().map(local).collect();
        let uv: Vec<[f64; 2]> = pts.iter().map(|q| [q[0], q[1]]).collect();
        match circle_center(&uv) {
            Some([_, v]) => v,
            None => pts.iter().map(|q| q[1]).sum::<f64>() / pts.len() as f64,
        }
    };
    let n = (left.len() + right.len()) as f64;
    let w = left.iter().chain(right).map(|p| local(p)[2]).sum::<f64>() / n;
    let v = (center_v(left) + center_v(right)) / 2.0;
    p0 + frame.y_axis * v + frame.z_axis * w
}

/// World → calibrated map `q = Fᵀ (p − P0)`, `F` the frame axes as columns.
pub fn estimate_transform(frame: &CalibrationFrame) -> RigidPose {
    let rt = frame.axes().transpose();
    RigidPose { rotation: rt, translation: -(rt * frame.origin) }
}

/// Angles (degrees) of the sagittal normal projected into each coordinate plane,
/// measured from that plane's first axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    /// In the xy plane, from +x.
    pub xy_deg: f64,
    /// In the xz plane, from +x.
    pub xz_deg: f64,
    /// In the yz plane, from +y.
    pub yz_deg: f64,
}

pub fn decompose_normal(x_axis: &Vector3<f64>) -> Decomposition {
    Decomposition {
        xy_deg: x_axis.y.atan2(x_axis.x).to_degrees(),
        xz_deg: x_axis.z.atan2(x_axis.x).to_degrees(),
        yz_deg: x_axis.z.atan2(x_axis.y).to_degrees(),
    }
}
