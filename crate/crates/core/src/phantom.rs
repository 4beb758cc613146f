//! Synthetic temporal-bone phantoms with two lateral-canal-like arcs.
//!
//! In the canonical frame each canal is the set of points within the tube
//! radius of a circular arc of the major radius lying in the `z = 0` plane,
//! centered at `(±half_separation, 0, 0)`. The arc's gap faces `-y`, so the
//! scene is mirror-symmetric about `x = 0`. A bone shell surrounds each tube.
//! The scene is moved by the skew pose and sampled at voxel centers of a grid
//! whose center sits at world `(0, 0, 0)`.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::RigidPose;
use crate::volume::{Cuboid, Grid, LabelMask, Volume, VolumeError, CUBOID_SIDE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhantomError {
    #[error("invalid phantom field '{field}': {reason}")]
    InvalidField { field: &'static str, reason: String },
    #[error("canal {canal} comes within {margin_mm:.3} mm of the volume boundary (need {required_mm:.3} mm)")]
    CanalsClipped { canal: &'static str, margin_mm: f64, required_mm: f64 },
    #[error("unknown phantom key '{0}'")]
    UnknownKey(String),
    #[error("mask has no foreground voxels")]
    EmptyMask,
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> PhantomError {
    PhantomError::InvalidField { field, reason: reason.into() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    /// Arc radius (mm).
    pub major_radius: f64,
    /// Canal lumen radius (mm).
    pub tube_radius: f64,
    pub arc_span_deg: f64,
    /// Distance from the symmetry plane to each arc center (mm).
    pub half_separation: f64,
    pub canal_intensity: f32,
    pub background_intensity: f32,
    pub shell_intensity: f32,
    /// Thickness of the bone shell around the lumen (mm).
    pub shell_thickness: f64,
    /// Amplitude `a` of additive uniform noise in `[-a, a]`.
    pub noise_amplitude: f32,
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub skew: RigidPose,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            major_radius: 3.0,
            tube_radius: 0.6,
            arc_span_deg: 240.0,
            half_separation: 30.0,
            canal_intensity: 0.0,
            background_intensity: -600.0,
            shell_intensity: 1400.0,
            shell_thickness: 1.0,
            noise_amplitude: 0.0,
            dims: [160, 72, 72],
            spacing: [0.5, 0.5, 0.5],
            skew: RigidPose::identity(),
            seed: 0,
        }
    }
}

impl PhantomSpec {
    /// Smallest distance between the canal intensity and the other two tissue classes.
    pub fn intensity_gap(&self) -> f32 {
        (self.canal_intensity - self.background_intensity)
            .abs()
            .min((self.canal_intensity - self.shell_intensity).abs())
    }

    /// Closed-form volume of one arc tube (mm³), end caps excluded.
    pub fn canal_volume_mm3(&self) -> f64 {
        (self.arc_span_deg / 360.0) * 2.0 * PI * self.major_radius * PI * self.tube_radius.powi(2)
    }

    /// Expected foreground voxel count of one canal under the centroid rule.
    pub fn expected_canal_voxels(&self) -> f64 {
        let voxel: f64 = self.spacing.iter().map(|&s| s as f64).product();
        self.canal_volume_mm3() / voxel
    }

    pub fn grid(&self) -> Result<Grid, PhantomError> {
        let origin = [0, 1, 2].map(|a| -((self.dims[a] as f64 - 1.0) / 2.0 * self.spacing[a] as f64) as f32);
        Ok(Grid::new(self.dims, self.spacing, origin)?)
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        let pos = |field, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(invalid(field, format!("must be positive, got {v}")))
            }
        };
        pos("tube_radius", self.tube_radius)?;
        pos("major_radius", self.major_radius)?;
        if self.major_radius <= self.tube_radius {
            return Err(invalid("major_radius", "must exceed tube_radius"));
        }
        if !(self.arc_span_deg > 0.0 && self.arc_span_deg <= 360.0) {
            return Err(invalid("arc_span_deg", format!("must be in (0, 360], got {}", self.arc_span_deg)));
        }
        if !(self.half_separation > self.major_radius) {
            return Err(invalid("half_separation", "must exceed major_radius"));
        }
        if !(self.shell_thickness >= 0.0 && self.shell_thickness.is_finite()) {
            return Err(invalid("shell_thickness", "must be non-negative"));
        }
        if !(self.noise_amplitude >= 0.0 && self.noise_amplitude.is_finite()) {
            return Err(invalid("noise_amplitude", "must be non-negative"));
        }
        for (field, v) in [
            ("canal_intensity", self.canal_intensity),
            ("background_intensity", self.background_intensity),
            ("shell_intensity", self.shell_intensity),
        ] {
            if !v.is_finite() {
                return Err(invalid(field, "must be finite"));
            }
        }
        if self.dims.iter().any(|&d| d == 0) {
            return Err(invalid("dims", "must all be >= 1"));
        }
        if self.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(invalid("spacing", "must be positive"));
        }
        if !self.skew.is_valid() || self.skew.translation.iter().any(|t| !t.is_finite()) {
            return Err(invalid("skew", "rotation must be orthonormal with det +1"));
        }
        self.check_fit()
    }

    /// Both skewed canal tubes must keep `2 * tube_radius` clearance from the
    /// outermost voxel centers.
    fn check_fit(&self) -> Result<(), PhantomError> {
        let grid = self.grid()?;
        let lo = grid.world([0.0; 3]);
        let hi = grid.world_of([self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1]);
        let required = 2.0 * self.tube_radius;
        let geom = ArcGeometry::new(self);
        for (canal, center) in [("left", geom.centers[0]), ("right", geom.centers[1])] {
            let mut margin = f64::INFINITY;
            let steps = 720;
            for s in 0..=steps {
                let phi = geom.arc_start + geom.arc_len * s as f64 / steps as f64;
                let q = center + Vector3::new(phi.cos(), phi.sin(), 0.0) * self.major_radius;
                let p = self.skew.apply(&q);
                for a in 0..3 {
                    margin = margin.min(p[a] - lo[a]).min(hi[a] - p[a]);
                }
            }
            margin -= self.tube_radius;
            if margin < required {
                return Err(PhantomError::CanalsClipped { canal, margin_mm: margin, required_mm: required });
            }
        }
        Ok(())
    }

    /// Flat `key = value` text, one entry per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let r = &self.skew.rotation;
        let t = &self.skew.translation;
        let _ = writeln!(s, "major_radius = {}", self.major_radius);
        let _ = writeln!(s, "tube_radius = {}", self.tube_radius);
        let _ = writeln!(s, "arc_span_deg = {}", self.arc_span_deg);
        let _ = writeln!(s, "half_separation = {}", self.half_separation);
        let _ = writeln!(s, "canal_intensity = {}", self.canal_intensity);
        let _ = writeln!(s, "background_intensity = {}", self.background_intensity);
        let _ = writeln!(s, "shell_intensity = {}", self.shell_intensity);
        let _ = writeln!(s, "shell_thickness = {}", self.shell_thickness);
        let _ = writeln!(s, "noise_amplitude = {}", self.noise_amplitude);
        let _ = writeln!(s, "dims = {},{},{}", self.dims[0], self.dims[1], self.dims[2]);
        let _ = writeln!(s, "spacing = {},{},{}", self.spacing[0], self.spacing[1], self.spacing[2]);
        let _ = writeln!(
            s,
            "skew_rotation = {},{},{},{},{},{},{},{},{}",
            r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)]
        );
        let _ = writeln!(s, "skew_translation = {},{},{}", t.x, t.y, t.z);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }

    pub fn from_text(text: &str) -> Result<Self, PhantomError> {
        let mut spec = Self::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PhantomError::UnknownKey(line.to_string()))?;
            if !spec.set(k.trim(), v.trim())? {
                return Err(PhantomError::UnknownKey(k.trim().to_string()));
            }
        }
        Ok(spec)
    }

    /// Apply one `key = value` override. Returns `Ok(false)` for keys that
    /// are not phantom fields so callers can route them elsewhere.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, PhantomError> {
        fn num<T: std::str::FromStr>(field: &'static str, v: &str) -> Result<T, PhantomError>
        where
            T::Err: std::fmt::Display,
        {
            v.trim().parse::<T>().map_err(|e| invalid(field, format!("'{v}': {e}")))
        }
        fn list<T: std::str::FromStr, const N: usize>(field: &'static str, v: &str) -> Result<[T; N], PhantomError>
        where
            T::Err: std::fmt::Display,
        {
            let items = v.split(',').map(|x| num::<T>(field, x)).collect::<Result<Vec<_>, _>>()?;
            let n = items.len();
            items.try_into().map_err(|_| invalid(field, format!("expected {N} values, got {n}")))
        }
        match key {
            "major_radius" => self.major_radius = num("major_radius", value)?,
            "tube_radius" => self.tube_radius = num("tube_radius", value)?,
            "arc_span_deg" => self.arc_span_deg = num("arc_span_deg", value)?,
            "half_separation" => self.half_separation = num("half_separation", value)?,
            "canal_intensity" => self.canal_intensity = num("canal_intensity", value)?,
            "background_intensity" => self.background_intensity = num("background_intensity", value)?,
            "shell_intensity" => self.shell_intensity = num("shell_intensity", value)?,
            "shell_thickness" => self.shell_thickness = num("shell_thickness", value)?,
            "noise_amplitude" => self.noise_amplitude = num("noise_amplitude", value)?,
            "dims" => self.dims = list::<usize, 3>("dims", value)?,
            "spacing" => self.spacing = list::<f32, 3>("spacing", value)?,
            "skew_rotation" => {
                let r = list::<f64, 9>("skew_rotation", value)?;
                self.skew.rotation = Matrix3::from_row_slice(&r);
            }
            "skew_translation" => {
                let t = list::<f64, 3>("skew_translation", value)?;
                self.skew.translation = Vector3::from(t);
            }
            "skew_euler_deg" => {
                let e = list::<f64, 3>("skew_euler_deg", value)?;
                self.skew = RigidPose::from_euler_deg(e[0], e[1], e[2], self.skew.translation);
            }
            "seed" => self.seed = num("seed", value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Canonical arc geometry shared by the generator and its clearance check.
struct ArcGeometry {
    centers: [Vector3<f64>; 2],
    /// First arc angle (radians, measured from +x in the canal plane).
    arc_start: f64,
    arc_len: f64,
    gap_half: f64,
    endpoints: [Vector3<f64>; 2],
    major_radius: f64,
}

const GAP_DIRECTION: f64 = -PI / 2.0;

impl ArcGeometry {
    fn new(spec: &PhantomSpec) -> Self {
        let arc_len = spec.arc_span_deg.to_radians();
        let gap_half = (2.0 * PI - arc_len) / 2.0;
        let arc_start = GAP_DIRECTION + gap_half;
        let end = arc_start + arc_len;
        let r = spec.major_radius;
        Self {
            centers: [
                Vector3::new(-spec.half_separation, 0.0, 0.0),
                Vector3::new(spec.half_separation, 0.0, 0.0),
            ],
            arc_start,
            arc_len,
            gap_half,
            endpoints: [
                Vector3::new(r * arc_start.cos(), r * arc_start.sin(), 0.0),
                Vector3::new(r * end.cos(), r * end.sin(), 0.0),
            ],
            major_radius: r,
        }
    }

    /// Distance from a canal-local point to the arc centerline.
    fn arc_distance(&self, u: &Vector3<f64>) -> f64 {
        let phi = u.y.atan2(u.x);
        let mut off_gap = (phi - GAP_DIRECTION).rem_euclid(2.0 * PI);
        if off_gap > PI {
            off_gap = 2.0 * PI - off_gap;
        }
        if off_gap >= self.gap_half {
            let rho = u.x.hypot(u.y);
            (rho - self.major_radius).hypot(u.z)
        } else {
            (u - self.endpoints[0]).norm().min((u - self.endpoints[1]).norm())
        }
    }

    /// Smallest centerline distance over both canals for a canonical point.
    fn distance(&self, q: &Vector3<f64>) -> f64 {
        let dl = self.arc_distance(&(q - self.centers[0]));
        let dr = self.arc_distance(&(q - self.centers[1]));
        dl.min(dr)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Uniform value in `[-1, 1]` keyed on `(seed, index)`.
pub fn counter_uniform(seed: u64, index: u64) -> f64 {
    let bits = splitmix64(splitmix64(seed) ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    let unit = (bits >> 11) as f64 / (1u64 << 53) as f64;
    2.0 * unit - 1.0
}

/// Analytic phantom: volume, exact canal mask and the ground-truth pose.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelMask, RigidPose), PhantomError> {
    spec.validate()?;
    let grid = spec.grid()?;
    let geom = ArcGeometry::new(spec);
    let inv = spec.skew.inverse();
    let shell_outer = spec.tube_radius + spec.shell_thickness;
    let mut voxels = Vec::with_capacity(grid.len());
    let mut labels = Vec::with_capacity(grid.len());
    let [nx, ny, nz] = grid.dims;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let q = inv.apply(&grid.world_of([i, j, k]));
                let d = geom.distance(&q);
                let (base, label) = if d <= spec.tube_radius {
                    (spec.canal_intensity, 1u8)
                } else if d <= shell_outer {
                    (spec.shell_intensity, 0)
                } else {
                    (spec.background_intensity, 0)
                };
                let noise = if spec.noise_amplitude > 0.0 {
                    let idx = grid.linear(i, j, k) as u64;
                    (counter_uniform(spec.seed, idx) * spec.noise_amplitude as f64) as f32
                } else {
                    0.0
                };
                voxels.push(base + noise);
                labels.push(label);
            }
        }
    }
    Ok((Volume::new(grid, voxels)?, LabelMask::new(grid, labels)?, spec.skew))
}

/// Distance (mm) from a canonical-frame point to the nearest canal centerline.
pub fn canonical_arc_distance(spec: &PhantomSpec, q: &Vector3<f64>) -> f64 {
    ArcGeometry::new(spec).distance(q)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Rotations are drawn uniformly in `[-max, max]` degrees per axis.
    pub max_rotation_deg: f64,
    /// Chance of centering the window near a foreground voxel.
    pub foreground_probability: f64,
    /// Maximum per-axis offset (voxels) of the window center from that voxel.
    pub jitter: i64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { max_rotation_deg: 5.0, foreground_probability: 2.0 / 3.0, jitter: 12 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub image: Cuboid<f32>,
    pub labels: Cuboid<u8>,
}

/// Resample the 48³ window at `offset` after rotating it about its center.
///
/// Intensities are trilinear, labels nearest-neighbor; samples outside the
/// parent take the volume minimum and label 0.
pub fn sample_pair_at(
    vol: &Volume,
    mask: &LabelMask,
    offset: [i64; 3],
    rotation: &Matrix3<f64>,
) -> Result<TrainingPair, PhantomError> {
    mask.ensure_congruent(vol.grid())?;
    let grid = vol.grid();
    let air = vol.min_value();
    let half = (CUBOID_SIDE as f64 - 1.0) / 2.0;
    let sp = grid.spacing.map(|s| s as f64);
    let center = [0, 1, 2].map(|a| offset[a] as f64 + half);
    let n = CUBOID_SIDE.pow(3);
    let mut image = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let identity = *rotation == Matrix3::identity();
    for k in 0..CUBOID_SIDE {
        for j in 0..CUBOID_SIDE {
            for i in 0..CUBOID_SIDE {
                let u = [i, j, k];
                let idx: [f64; 3] = if identity {
                    [0, 1, 2].map(|a| (offset[a] + u[a] as i64) as f64)
                } else {
                    let rel = Vector3::new(
                        (i as f64 - half) * sp[0],
                        (j as f64 - half) * sp[1],
                        (k as f64 - half) * sp[2],
                    );
                    let r = rotation * rel;
                    [0, 1, 2].map(|a| center[a] + r[a] / sp[a])
                };
                image.push(vol.sample_trilinear(idx).unwrap_or(air));
                let near = idx.map(|x| x.round() as i64);
                labels.push(if grid.contains(near) {
                    mask.get(near[0] as usize, near[1] as usize, near[2] as usize)
                } else {
                    0
                });
            }
        }
    }
    let off = offset.map(|o| o.max(0) as usize);
    Ok(TrainingPair {
        image: Cuboid { values: image, offset: off },
        labels: Cuboid { values: labels, offset: off },
    })
}

/// Foreground-biased random 48³ training pair with rotation augmentation.
pub fn sample_training_pair(
    vol: &Volume,
    mask: &LabelMask,
    seed: u64,
    config: &AugmentConfig,
) -> Result<TrainingPair, PhantomError> {
    let fg = mask.foreground();
    if fg.is_empty() {
        return Err(PhantomError::EmptyMask);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = vol.dims();
    let max_off = dims.map(|d| d.saturating_sub(CUBOID_SIDE) as i64);
    let side = CUBOID_SIDE as i64;
    let offset = if rng.gen_bool(config.foreground_probability.clamp(0.0, 1.0)) {
        let f = fg[rng.gen_range(0..fg.len())];
        [0, 1, 2].map(|a| {
            let jitter = if config.jitter > 0 { rng.gen_range(-config.jitter..=config.jitter) } else { 0 };
            (f[a] as i64 - side / 2 + jitter).clamp(0, max_off[a])
        })
    } else {
        [0, 1, 2].map(|a| rng.gen_range(0..=max_off[a]))
    };
    let m = config.max_rotation_deg;
    let angles = [0; 3].map(|_| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 });
    let rotation = RigidPose::from_euler_deg(angles[0], angles[1], angles[2], Vector3::zeros()).rotation;
    sample_pair_at(vol, mask, offset, &rotation)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_mask_is_mirror_symmetric_and_planar() {
        let spec = PhantomSpec::default();
        let (_, mask, pose) = generate_phantom(&spec).unwrap();
        assert_eq!(pose, spec.skew);
        let [nx, ny, nz] = mask.dims();
        let mut count = 0;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    if mask.get(i, j, k) == 1 {
                        count += 1;
                        assert_eq!(mask.get(nx - 1 - i, j, k), 1, "mirror of ({i},{j},{k})");
                        let z = mask.grid().world_of([i, j, k]).z;
                        assert!(z.abs() <= spec.tube_radius);
                    }
                }
            }
        }
        assert!(count > 0);
    }

    #[test]
    fn foreground_count_matches_tube_volume() {
        let spec = PhantomSpec::default();
        let (_, mask, _) = generate_phantom(&spec).unwrap();
        let expected = 2.0 * spec.expected_canal_voxels();
        let got = mask.count() as f64;
        assert!((got - expected).abs() <= 0.2 * expected, "got {got}, expected {expected}");
    }

    #[test]
    fn intensities_by_region_without_noise() {
        let spec = PhantomSpec::default();
        let (vol, mask, _) = generate_phantom(&spec).unwrap();
        for (v, l) in vol.voxels().iter().zip(mask.labels()) {
            if *l == 1 {
                assert_eq!(*v, spec.canal_intensity);
            } else {
                assert!(*v == spec.background_intensity || *v == spec.shell_intensity);
            }
        }
    }

    #[test]
    fn mask_is_noise_independent_and_seed_deterministic() {
        let mut spec = PhantomSpec { dims: [150, 40, 40], ..PhantomSpec::default() };
        spec.noise_amplitude = 100.0;
        spec.seed = 3;
        let (v1, m1, _) = generate_phantom(&spec).unwrap();
        let (v2, _, _) = generate_phantom(&spec).unwrap();
        assert!(v1.voxels().iter().zip(v2.voxels()).all(|(a, b)| a.to_bits() == b.to_bits()));
        spec.noise_amplitude = 0.0;
        let (_, m0, _) = generate_phantom(&spec).unwrap();
        assert_eq!(m1, m0);
        for (v, l) in v1.voxels().iter().zip(m1.labels()) {
            if *l == 1 {
                assert!((v - spec.canal_intensity).abs() <= 100.0);
            }
        }
    }

    #[test]
    fn skewed_mask_maps_back_onto_arcs() {
        let spec = PhantomSpec {
            skew: RigidPose::from_euler_deg(8.0, -12.0, 15.0, Vector3::new(1.5, -2.0, 0.5)),
            ..PhantomSpec::default()
        };
        let (_, mask, pose) = generate_phantom(&spec).unwrap();
        let inv = pose.inverse();
        let half_diag = 0.5 * spec.spacing.iter().map(|&s| (s as f64).powi(2)).sum::<f64>().sqrt();
        for idx in mask.foreground() {
            let q = inv.apply(&mask.grid().world_of(idx));
            assert!(canonical_arc_distance(&spec, &q) <= spec.tube_radius + half_diag);
        }
    }

    #[test]
    fn clipping_is_reported() {
        let spec = PhantomSpec { dims: [130, 72, 72], ..PhantomSpec::default() };
        assert!(matches!(generate_phantom(&spec), Err(PhantomError::CanalsClipped { .. })));
    }

    #[test]
    fn invalid_fields_are_named() {
        let spec = PhantomSpec { tube_radius: 4.0, ..PhantomSpec::default() };
        assert!(matches!(spec.validate(), Err(PhantomError::InvalidField { field: "major_radius", .. })));
        let spec = PhantomSpec { arc_span_deg: 400.0, ..PhantomSpec::default() };
        assert!(matches!(spec.validate(), Err(PhantomError::InvalidField { field: "arc_span_deg", .. })));
        let spec = PhantomSpec { half_separation: 2.0, ..PhantomSpec::default() };
        assert!(matches!(spec.validate(), Err(PhantomError::InvalidField { field: "half_separation", .. })));
    }

    #[test]
    fn spec_text_roundtrip() {
        let spec = PhantomSpec {
            skew: RigidPose::from_euler_deg(3.3, -1.0, 7.25, Vector3::new(0.1, 0.2, -0.3)),
            noise_amplitude: 12.5,
            seed: 42,
            ..PhantomSpec::default()
        };
        let back = PhantomSpec::from_text(&spec.to_text()).unwrap();
        assert_eq!(back, spec);
        assert!(matches!(PhantomSpec::from_text("bogus = 1"), Err(PhantomError::UnknownKey(_))));
        assert!(matches!(
            PhantomSpec::from_text("dims = 1,2"),
            Err(PhantomError::InvalidField { field: "dims", .. })
        ));
    }

    #[test]
    fn unrotated_window_copies_parent() {
        let spec = PhantomSpec::default();
        let (vol, mask, _) = generate_phantom(&spec).unwrap();
        // window around the left canal (world x = -30 mm)
        let c = mask.grid().index_of(&Vector3::new(-30.0, 0.0, 0.0)).map(|x| x.round() as i64);
        let offset = c.map(|v| (v - 24).max(0));
        let pair = sample_pair_at(&vol, &mask, offset, &Matrix3::identity()).unwrap();
        let mut inside = 0;
        for k in 0..48 {
            for j in 0..48 {
                for i in 0..48 {
                    let p = [offset[0] as usize + i, offset[1] as usize + j, offset[2] as usize + k];
                    inside += mask.get(p[0], p[1], p[2]) as usize;
                    assert_eq!(pair.image.get(i, j, k), vol.get(p[0], p[1], p[2]));
                }
            }
        }
        let fg = pair.labels.values.iter().filter(|&&l| l == 1).count();
        assert_eq!(fg, inside);
        assert!(fg > 0);
    }

    #[test]
    fn sampling_is_seeded() {
        let spec = PhantomSpec::default();
        let (vol, mask, _) = generate_phantom(&spec).unwrap();
        let cfg = AugmentConfig::default();
        let a = sample_training_pair(&vol, &mask, 9, &cfg).unwrap();
        let b = sample_training_pair(&vol, &mask, 9, &cfg).unwrap();
        assert_eq!(a, b);
        let empty = LabelMask::empty(*mask.grid());
        assert_eq!(sample_training_pair(&vol, &empty, 9, &cfg), Err(PhantomError::EmptyMask));
    }

    #[test]
    fn counter_noise_is_uniform_in_range() {
        let n = 100_000;
        let mut sum = 0.0;
        for i in 0..n {
            let u = counter_uniform(7, i);
            assert!((-1.0..=1.0).contains(&u));
            sum += u;
        }
        assert!((sum / n as f64).abs() < 0.01);
        assert_ne!(counter_uniform(7, 1), counter_uniform(8, 1));
    }
}
