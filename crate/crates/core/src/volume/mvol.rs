//! `MVOL` container: a fixed 48-byte little-endian header followed by the
//! voxel payload in x-fastest order.
//!
//! ```text
//! 0..4    magic "MVOL"
//! 4       version (1)
//! 5       dtype (1 = f32, 2 = u8)
//! 6..8    reserved, zero
//! 8..20   dims, 3 x u32
//! 20..32  spacing (mm), 3 x f32
//! 32..44  origin (mm), 3 x f32
//! 44..48  reserved, zero
//! 48..    payload
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{Grid, LabelMask, Volume, VolumeError};

pub const MAGIC: &[u8; 4] = b"MVOL";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 48;
const DTYPE_F32: u8 = 1;
const DTYPE_U8: u8 = 2;

#[derive(Debug, Error)]
pub enum MvolError {
    #[error("bad magic bytes {0:?}, expected \"MVOL\"")]
    BadMagic([u8; 4]),
    #[error("unsupported MVOL version {0}")]
    UnsupportedVersion(u8),
    #[error("unsupported dtype code {0} (expected 1 = f32 or 2 = u8)")]
    UnsupportedDtype(u8),
    #[error("truncated MVOL data: need {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{0} unexpected bytes after the payload")]
    TrailingBytes(usize),
    #[error("non-positive or non-finite spacing {0:?}")]
    NonPositiveSpacing([f32; 3]),
    #[error("invalid contents: {0}")]
    Invalid(#[from] VolumeError),
    #[error("i/o error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Anything an `MVOL` file can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum MvolObject {
    Volume(Volume),
    Mask(LabelMask),
}

impl MvolObject {
    pub fn grid(&self) -> &Grid {
        match self {
            MvolObject::Volume(v) => v.grid(),
            MvolObject::Mask(m) => m.grid(),
        }
    }

    pub fn into_volume(self) -> Option<Volume> {
        match self {
            MvolObject::Volume(v) => Some(v),
            MvolObject::Mask(_) => None,
        }
    }

    pub fn into_mask(self) -> Option<LabelMask> {
        match self {
            MvolObject::Mask(m) => Some(m),
            MvolObject::Volume(_) => None,
        }
    }
}

impl From<Volume> for MvolObject {
    fn from(v: Volume) -> Self {
        MvolObject::Volume(v)
    }
}

impl From<LabelMask> for MvolObject {
    fn from(m: LabelMask) -> Self {
        MvolObject::Mask(m)
    }
}

fn header(grid: &Grid, dtype: u8) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[0..4].copy_from_slice(MAGIC);
    h[4] = VERSION;
    h[5] = dtype;
    for a in 0..3 {
        let d = u32::try_from(grid.dims[a]).expect("dimension exceeds u32");
        h[8 + 4 * a..12 + 4 * a].copy_from_slice(&d.to_le_bytes());
        h[20 + 4 * a..24 + 4 * a].copy_from_slice(&grid.spacing[a].to_le_bytes());
        h[32 + 4 * a..36 + 4 * a].copy_from_slice(&grid.origin[a].to_le_bytes());
    }
    h
}

pub fn encode_mvol(obj: &MvolObject) -> Vec<u8> {
    match obj {
        MvolObject::Volume(v) => {
            let mut out = Vec::with_capacity(HEADER_LEN + 4 * v.voxels().len());
            out.extend_from_slice(&header(v.grid(), DTYPE_F32));
            for x in v.voxels() {
                out.extend_from_slice(&x.to_le_bytes());
            }
            out
        }
        MvolObject::Mask(m) => {
            let mut out = Vec::with_capacity(HEADER_LEN + m.labels().len());
            out.extend_from_slice(&header(m.grid(), DTYPE_U8));
            out.extend_from_slice(m.labels());
            out
        }
    }
}

fn f32_at(bytes: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn decode_mvol(bytes: &[u8]) -> Result<MvolObject, MvolError> {
    if bytes.len() < 4 {
        return Err(MvolError::Truncated { expected: HEADER_LEN, actual: bytes.len() });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(MvolError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(MvolError::Truncated { expected: HEADER_LEN, actual: bytes.len() });
    }
    if bytes[4] != VERSION {
        return Err(MvolError::UnsupportedVersion(bytes[4]));
    }
    let dtype = bytes[5];
    let elem = match dtype {
        DTYPE_F32 => 4,
        DTYPE_U8 => 1,
        other => return Err(MvolError::UnsupportedDtype(other)),
    };
    let dims = [0, 1, 2].map(|a| u32_at(bytes, 8 + 4 * a) as usize);
    let spacing = [0, 1, 2].map(|a| f32_at(bytes, 20 + 4 * a));
    let origin = [0, 1, 2].map(|a| f32_at(bytes, 32 + 4 * a));
    if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(MvolError::NonPositiveSpacing(spacing));
    }
    let grid = Grid::new(dims, spacing, origin)?;
    let expected = dims
        .iter()
        .try_fold(elem, |acc: usize, &d| acc.checked_mul(d))
        .and_then(|p| p.checked_add(HEADER_LEN))
        .unwrap_or(usize::MAX);
    if bytes.len() < expected {
        return Err(MvolError::Truncated { expected, actual: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(MvolError::TrailingBytes(bytes.len() - expected));
    }
    let payload = &bytes[HEADER_LEN..];
    Ok(match dtype {
        DTYPE_F32 => {
            let voxels = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            MvolObject::Volume(Volume::new(grid, voxels)?)
        }
        _ => MvolObject::Mask(LabelMask::new(grid, payload.to_vec())?),
    })
}

pub fn read_mvol(path: impl AsRef<Path>) -> Result<MvolObject, MvolError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| MvolError::Io { path: path.display().to_string(), source })?;
    decode_mvol(&bytes)
}

pub fn write_mvol(obj: &MvolObject, path: impl AsRef<Path>) -> Result<(), MvolError> {
    let path = path.as_ref();
    fs::write(path, encode_mvol(obj))
        .map_err(|source| MvolError::Io { path: path.display().to_string(), source })
}
