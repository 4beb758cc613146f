//! Import of a directory of raw 2D slices.
//!
//! The directory holds equally sized little-endian slice files with the
//! `.raw` extension and a sidecar `stack.txt`:
//!
//! ```text
//! nx = 512
//! ny = 512
//! spacing = 0.4, 0.4, 0.625
//! dtype = i16
//! origin = 0, 0, 0        # optional
//! ```
//!
//! Slices are stacked along z in filename-sorted order.

use std::fs;
use std::path::Path;

use super::{Grid, Volume, VolumeError};
use crate::{Error, Result};

pub const SIDECAR: &str = "stack.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RawDtype {
    U8,
    I16,
    U16,
    F32,
}

impl RawDtype {
    fn size(self) -> usize {
        match self {
            RawDtype::U8 => 1,
            RawDtype::I16 | RawDtype::U16 => 2,
            RawDtype::F32 => 4,
        }
    }

    fn decode(self, bytes: &[u8], out: &mut Vec<f32>) {
        match self {
            RawDtype::U8 => out.extend(bytes.iter().map(|&b| b as f32)),
            RawDtype::I16 => out.extend(
                bytes.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f32),
            ),
            RawDtype::U16 => out.extend(
                bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as f32),
            ),
            RawDtype::F32 => out.extend(
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawStackHeader {
    pub nx: usize,
    pub ny: usize,
    pub spacing: [f32; 3],
    pub origin: [f32; 3],
    pub dtype: RawDtype,
}

fn parse_triple(key: &str, value: &str) -> Result<[f32; 3]> {
    let parts: Vec<f32> = value
        .split(',')
        .map(|s| s.trim().parse::<f32>())
        .collect::<Result<_, _>>()
        .map_err(|e| Error::Invalid(format!("{SIDECAR}: bad {key} '{value}': {e}")))?;
    <[f32; 3]>::try_from(parts)
        .map_err(|_| Error::Invalid(format!("{SIDECAR}: {key} needs three values")))
}

impl RawStackHeader {
    pub fn parse(text: &str) -> Result<Self> {
        let mut nx = None;
        let mut ny = None;
        let mut spacing = None;
        let mut origin = [0.0; 3];
        let mut dtype = None;
        for line in text.lines() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("{SIDECAR}: expected key = value, got '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: std::num::ParseIntError| Error::Invalid(format!("{SIDECAR}: bad {key}: {e}"));
            match key {
                "nx" => nx = Some(value.parse::<usize>().map_err(bad)?),
                "ny" => ny = Some(value.parse::<usize>().map_err(bad)?),
                "spacing" => spacing = Some(parse_triple(key, value)?),
                "origin" => origin = parse_triple(key, value)?,
                "dtype" => {
                    dtype = Some(match value {
                        "u8" => RawDtype::U8,
                        "i16" => RawDtype::I16,
                        "u16" => RawDtype::U16,
                        "f32" => RawDtype::F32,
                        other => return Err(Error::Invalid(format!("{SIDECAR}: unknown dtype '{other}'"))),
                    })
                }
                other => return Err(Error::Invalid(format!("{SIDECAR}: unknown key '{other}'"))),
            }
        }
        let missing = |k: &str| Error::Invalid(format!("{SIDECAR}: missing '{k}'"));
        Ok(Self {
            nx: nx.ok_or_else(|| missing("nx"))?,
            ny: ny.ok_or_else(|| missing("ny"))?,
            spacing: spacing.ok_or_else(|| missing("spacing"))?,
            origin,
            dtype: dtype.ok_or_else(|| missing("dtype"))?,
        })
    }
}

pub fn import_raw_stack(dir: impl AsRef<Path>) -> Result<Volume> {
    let dir = dir.as_ref();
    let header = RawStackHeader::parse(&fs::read_to_string(dir.join(SIDECAR))?)?;
    let mut slices: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "raw"))
        .collect();
    slices.sort();
    if slices.is_empty() {
        return Err(Error::Invalid(format!("no .raw slices in {}", dir.display())));
    }
    let slice_bytes = header.nx * header.ny * header.dtype.size();
    let mut voxels = Vec::with_capacity(header.nx * header.ny * slices.len());
    for path in &slices {
        let bytes = fs::read(path)?;
        if bytes.len() != slice_bytes {
            return Err(Error::Invalid(format!(
                "slice {} has {} bytes, expected {slice_bytes}",
                path.display(),
                bytes.len()
            )));
        }
        header.dtype.decode(&bytes, &mut voxels);
    }
    let grid = Grid::new([header.nx, header.ny, slices.len()], header.spacing, header.origin)?;
    Volume::new(grid, voxels).map_err(|e: VolumeError| e.into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stacks_in_filename_order() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join(SIDECAR),
            "nx = 2\nny = 2\nspacing = 0.5, 0.5, 1.0 # mm\ndtype = i16\n",
        )
        .unwrap();
        let slice = |base: i16| -> Vec<u8> { (0..4).flat_map(|i| (base + i).to_le_bytes()).collect() };
        // written out of order on purpose
        fs::write(dir.path().join("slice_002.raw"), slice(200)).unwrap();
        fs::write(dir.path().join("slice_001.raw"), slice(-100)).unwrap();
        fs::write(dir.path().join("notes.md"), "ignored").unwrap();
        let vol = import_raw_stack(dir.path()).unwrap();
        assert_eq!(vol.dims(), [2, 2, 2]);
        assert_eq!(vol.grid().spacing, [0.5, 0.5, 1.0]);
        assert_eq!(vol.voxels(), &[-100.0, -99.0, -98.0, -97.0, 200.0, 201.0, 202.0, 203.0]);
    }

    #[test]
    fn rejects_ragged_slice() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(SIDECAR), "nx=2\nny=2\nspacing=1,1,1\ndtype=u8\n").unwrap();
        fs::write(dir.path().join("a.raw"), [0u8; 4]).unwrap();
        fs::write(dir.path().join("b.raw"), [0u8; 3]).unwrap();
        assert!(import_raw_stack(dir.path()).is_err());
    }

    #[test]
    fn header_requires_fields() {
        assert!(RawStackHeader::parse("nx=2\nny=2\ndtype=u8").is_err());
        assert!(RawStackHeader::parse("nx=2\nny=2\nspacing=1,1\ndtype=u8").is_err());
        assert!(RawStackHeader::parse("nx=2\nny=2\nspacing=1,1,1\ndtype=f64").is_err());
    }
}
