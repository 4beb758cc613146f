//! Voxel grids, binary label masks and 48³ cuboids.
//!
//! Voxels are stored x-fastest: the linear index of `(i, j, k)` is
//! `i + nx * (j + ny * k)`. World coordinates are millimeters,
//! `world(i, j, k) = origin + (i * sx, j * sy, k * sz)`.

mod mvol;
mod raw_stack;

use nalgebra::Vector3;
use thiserror::Error;

pub use mvol::{decode_mvol, encode_mvol, read_mvol, write_mvol, MvolError, MvolObject, HEADER_LEN};
pub use raw_stack::{import_raw_stack, RawDtype, RawStackHeader};

/// Side length of the network input cuboid.
pub const CUBOID_SIDE: usize = 48;

/// Default intensity window for network input conditioning (air to dense bone).
pub const DEFAULT_WINDOW: (f32, f32) = (-1000.0, 3000.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VolumeError {
    #[error("dimensions must all be >= 1, got {0:?}")]
    InvalidDims([usize; 3]),
    #[error("spacing must be positive and finite, got {0:?}")]
    InvalidSpacing([f32; 3]),
    #[error("origin must be finite, got {0:?}")]
    InvalidOrigin([f32; 3]),
    #[error("expected {expected} voxels, got {actual}")]
    VoxelCount { expected: usize, actual: usize },
    #[error("label value {0} at voxel {1} is not 0 or 1")]
    InvalidLabel(u8, usize),
    #[error("cuboid at offset {offset:?} exceeds dims {dims:?}")]
    CuboidOutOfBounds { offset: [usize; 3], dims: [usize; 3] },
    #[error("intensity window requires lo < hi, got ({0}, {1})")]
    InvalidWindow(f32, f32),
    #[error("grids differ: {0:?} vs {1:?}")]
    GridMismatch(Box<Grid>, Box<Grid>),
}

/// Geometry shared by volumes and masks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub origin: [f32; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], origin: [f32; 3]) -> Result<Self, VolumeError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::InvalidDims(dims));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(VolumeError::InvalidSpacing(spacing));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(VolumeError::InvalidOrigin(origin));
        }
        Ok(Self { dims, spacing, origin })
    }

    /// Grid with the origin at (0, 0, 0).
    pub fn with_spacing(dims: [usize; 3], spacing: [f32; 3]) -> Result<Self, VolumeError> {
        Self::new(dims, spacing, [0.0; 3])
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn linear(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, linear: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [linear % nx, (linear / nx) % ny, linear / (nx * ny)]
    }

    pub fn contains(&self, idx: [i64; 3]) -> bool {
        (0..3).all(|a| idx[a] >= 0 && (idx[a] as usize) < self.dims[a])
    }

    /// World position (mm) of a possibly fractional voxel index.
    #[inline]
    pub fn world(&self, idx: [f64; 3]) -> Vector3<f64> {
        Vector3::new(
            self.origin[0] as f64 + idx[0] * self.spacing[0] as f64,
            self.origin[1] as f64 + idx[1] * self.spacing[1] as f64,
            self.origin[2] as f64 + idx[2] * self.spacing[2] as f64,
        )
    }

    #[inline]
    pub fn world_of(&self, idx: [usize; 3]) -> Vector3<f64> {
        self.world([idx[0] as f64, idx[1] as f64, idx[2] as f64])
    }

    /// Continuous voxel index of a world position; inverse of [`Grid::world`].
    #[inline]
    pub fn index_of(&self, p: &Vector3<f64>) -> [f64; 3] {
        [
            (p.x - self.origin[0] as f64) / self.spacing[0] as f64,
            (p.y - self.origin[1] as f64) / self.spacing[1] as f64,
            (p.z - self.origin[2] as f64) / self.spacing[2] as f64,
        ]
    }

    /// World position of the grid center.
    pub fn center(&self) -> Vector3<f64> {
        self.world([
            (self.dims[0] - 1) as f64 / 2.0,
            (self.dims[1] - 1) as f64 / 2.0,
            (self.dims[2] - 1) as f64 / 2.0,
        ])
    }
}

/// Scalar CT volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: Grid,
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(grid: Grid, voxels: Vec<f32>) -> Result<Self, VolumeError> {
        if voxels.len() != grid.len() {
            return Err(VolumeError::VoxelCount { expected: grid.len(), actual: voxels.len() });
        }
        Ok(Self { grid, voxels })
    }

    pub fn filled(grid: Grid, value: f32) -> Self {
        Self { voxels: vec![value; grid.len()], grid }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.voxels[self.grid.linear(i, j, k)]
    }

    pub fn min_value(&self) -> f32 {
        self.voxels.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max_value(&self) -> f32 {
        self.voxels.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// Trilinear sample at a continuous voxel index; `None` outside the
    /// convex hull of voxel centers.
    pub fn sample_trilinear(&self, idx: [f64; 3]) -> Option<f32> {
        let d = self.grid.dims;
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let x = idx[a];
            let hi = (d[a] - 1) as f64;
            // tolerate round-off at the hull faces
            if !(x >= -1e-9 && x <= hi + 1e-9) {
                return None;
            }
            let x = x.clamp(0.0, hi);
            if d[a] == 1 {
                base[a] = 0;
                frac[a] = 0.0;
                continue;
            }
            let b = (x.floor() as usize).min(d[a] - 2);
            base[a] = b;
            frac[a] = x - b as f64;
        }
        let step = [
            usize::from(d[0] > 1),
            if d[1] > 1 { d[0] } else { 0 },
            if d[2] > 1 { d[0] * d[1] } else { 0 },
        ];
        let i0 = self.grid.linear(base[0], base[1], base[2]);
        let v = |o: usize| self.voxels[i0 + o] as f64;
        let (fx, fy, fz) = (frac[0], frac[1], frac[2]);
        let c00 = v(0) * (1.0 - fx) + v(step[0]) * fx;
        let c10 = v(step[1]) * (1.0 - fx) + v(step[1] + step[0]) * fx;
        let c01 = v(step[2]) * (1.0 - fx) + v(step[2] + step[0]) * fx;
        let c11 = v(step[2] + step[1]) * (1.0 - fx) + v(step[2] + step[1] + step[0]) * fx;
        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;
        Some((c0 * (1.0 - fz) + c1 * fz) as f32)
    }
}

/// Binary voxel mask, 0 = background, 1 = canal.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    grid: Grid,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(grid: Grid, labels: Vec<u8>) -> Result<Self, VolumeError> {
        if labels.len() != grid.len() {
            return Err(VolumeError::VoxelCount { expected: grid.len(), actual: labels.len() });
        }
        if let Some(pos) = labels.iter().position(|&l| l > 1) {
            return Err(VolumeError::InvalidLabel(labels[pos], pos));
        }
        Ok(Self { grid, labels })
    }

    pub fn empty(grid: Grid) -> Self {
        Self { labels: vec![0; grid.len()], grid }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        self.labels[self.grid.linear(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, on: bool) {
        let l = self.grid.linear(i, j, k);
        self.labels[l] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    /// Voxel indices of all foreground voxels in linear order.
    pub fn foreground(&self) -> Vec<[usize; 3]> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == 1)
            .map(|(i, _)| self.grid.coords(i))
            .collect()
    }

    /// Check that `other` shares this mask's grid exactly.
    pub fn ensure_congruent(&self, other: &Grid) -> Result<(), VolumeError> {
        if &self.grid != other {
            return Err(VolumeError::GridMismatch(Box::new(self.grid), Box::new(*other)));
        }
        Ok(())
    }
}

/// A 48³ window copied out of a parent grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Cuboid<T> {
    pub values: Vec<T>,
    pub offset: [usize; 3],
}

impl<T: Copy> Cuboid<T> {
    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.values[i + CUBOID_SIDE * (j + CUBOID_SIDE * k)]
    }
}

fn check_cuboid_bounds(grid: &Grid, offset: [usize; 3]) -> Result<(), VolumeError> {
    if (0..3).any(|a| offset[a] + CUBOID_SIDE > grid.dims[a]) {
        return Err(VolumeError::CuboidOutOfBounds { offset, dims: grid.dims });
    }
    Ok(())
}

fn copy_window<T: Copy>(grid: &Grid, src: &[T], offset: [usize; 3]) -> Vec<T> {
    let mut out = Vec::with_capacity(CUBOID_SIDE.pow(3));
    for k in 0..CUBOID_SIDE {
        for j in 0..CUBOID_SIDE {
            let start = grid.linear(offset[0], offset[1] + j, offset[2] + k);
            out.extend_from_slice(&src[start..start + CUBOID_SIDE]);
        }
    }
    out
}

pub fn extract_cuboid(vol: &Volume, offset: [usize; 3]) -> Result<Cuboid<f32>, VolumeError> {
    check_cuboid_bounds(&vol.grid, offset)?;
    Ok(Cuboid { values: copy_window(&vol.grid, &vol.voxels, offset), offset })
}

pub fn extract_label_cuboid(mask: &LabelMask, offset: [usize; 3]) -> Result<Cuboid<u8>, VolumeError> {
    check_cuboid_bounds(&mask.grid, offset)?;
    Ok(Cuboid { values: copy_window(&mask.grid, &mask.labels, offset), offset })
}

/// Clamp to `[lo, hi]` and map affinely onto `[0, 1]`.
pub fn normalize_intensity(vol: &Volume, window: (f32, f32)) -> Result<Volume, VolumeError> {
    let voxels = normalize_values(&vol.voxels, window)?;
    Ok(Volume { grid: vol.grid, voxels })
}

pub fn normalize_values(values: &[f32], (lo, hi): (f32, f32)) -> Result<Vec<f32>, VolumeError> {
    if !(lo < hi) {
        return Err(VolumeError::InvalidWindow(lo, hi));
    }
    let scale = 1.0 / (hi as f64 - lo as f64);
    Ok(values
        .iter()
        .map(|&v| ((v.clamp(lo, hi) as f64 - lo as f64) * scale) as f32)
        .collect())
}
