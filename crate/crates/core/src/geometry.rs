//! Rigid poses in world millimeters.

use nalgebra::{Matrix3, Rotation3, Vector3};

const ORTHO_TOL: f64 = 1e-9;

/// Rotation followed by translation: `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidPose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Fails unless `rotation` is orthonormal with determinant +1 (to 1e-9).
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, String> {
        let pose = Self { rotation, translation };
        if !pose.is_valid() {
            return Err(format!("rotation is not a proper orthonormal matrix: {rotation}"));
        }
        if translation.iter().any(|t| !t.is_finite()) {
            return Err("translation must be finite".into());
        }
        Ok(pose)
    }

    /// `R = Rz(z) * Ry(y) * Rx(x)`, angles in degrees.
    pub fn from_euler_deg(x: f64, y: f64, z: f64, translation: Vector3<f64>) -> Self {
        let r = Rotation3::from_euler_angles(x.to_radians(), y.to_radians(), z.to_radians());
        Self { rotation: *r.matrix(), translation }
    }

    /// Inverse of [`RigidPose::from_euler_deg`]: `(x, y, z)` degrees.
    pub fn euler_deg(&self) -> [f64; 3] {
        let (x, y, z) = Rotation3::from_matrix_unchecked(self.rotation).euler_angles();
        [x.to_degrees(), y.to_degrees(), z.to_degrees()]
    }

    pub fn is_valid(&self) -> bool {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max() <= ORTHO_TOL;
        ortho && (r.determinant() - 1.0).abs() <= ORTHO_TOL && r.iter().all(|v| v.is_finite())
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidPose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Angle of the rotation part, degrees.
    pub fn rotation_angle_deg(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos().to_degrees()
    }

    /// Angle of `a^T b`, degrees.
    pub fn rotation_distance_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
        let c = (((a.transpose() * b).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos().to_degrees()
    }
}

/// Angle between two vectors in degrees.
pub fn angle_between_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    // atan2 form stays accurate for nearly parallel vectors
    a.cross(b).norm().atan2(a.dot(b)).to_degrees()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn euler_roundtrip_and_validity() {
        let p = RigidPose::from_euler_deg(10.0, -7.0, 12.5, Vector3::new(1.0, 2.0, 3.0));
        assert!(p.is_valid());
        let e = p.euler_deg();
        assert!((e[0] - 10.0).abs() < 1e-9 && (e[1] + 7.0).abs() < 1e-9 && (e[2] - 12.5).abs() < 1e-9);
        let id = p.compose(&p.inverse());
        assert!(id.rotation_angle_deg() < 1e-6);
        assert!(id.translation.norm() < 1e-12);
    }

    #[test]
    fn rx_encoding() {
        let p = RigidPose::from_euler_deg(10.0, 0.0, 0.0, Vector3::zeros());
        let (s, c) = 10f64.to_radians().sin_cos();
        let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c);
        assert!((p.rotation - rx).abs().max() < 1e-12);
        assert!((p.rotation_angle_deg() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_reflection() {
        let m = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0));
        assert!(RigidPose::new(m, Vector3::zeros()).is_err());
        assert!(RigidPose::new(Matrix3::identity() * 1.01, Vector3::zeros()).is_err());
    }

    #[test]
    fn small_angles_are_accurate() {
        let a = Vector3::new(1.0, 0.0, 0.0);
        let b = Vector3::new(1.0, 1e-9, 0.0);
        assert!((angle_between_deg(&a, &b) - 1e-9f64.to_degrees()).abs() < 1e-15);
    }
}
