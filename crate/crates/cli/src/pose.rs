//! Pose text files: nine rotation entries row-major, then three translation
//! entries, one value per line.

use std::path::Path;

use anyhow::{bail, Context, Result};
use lsccal::geometry::RigidPose;
use nalgebra::{Matrix3, Vector3};

pub fn format_pose(pose: &RigidPose) -> String {
    let r = &pose.rotation;
    let t = &pose.translation;
    let mut out = String::new();
    for i in 0..3 {
        for j in 0..3 {
            out.push_str(&format!("{:.12}\n", r[(i, j)]));
        }
    }
    for v in t.iter() {
        out.push_str(&format!("{v:.12}\n"));
    }
    out
}

pub fn parse_pose(text: &str) -> Result<RigidPose> {
    let values = text
        .split_whitespace()
        .map(|s| s.parse::<f64>().with_context(|| format!("bad pose value '{s}'")))
        .collect::<Result<Vec<_>>>()?;
    if values.len() != 12 {
        bail!("pose file must hold 12 values, found {}", values.len());
    }
    let rotation = Matrix3::from_row_slice(&values[..9]);
    let translation = Vector3::new(values[9], values[10], values[11]);
    // 12 printed digits leave rotations orthonormal to about 1e-12
    RigidPose::new(rotation, translation).map_err(anyhow::Error::msg)
}

pub fn write_pose(path: &Path, pose: &RigidPose) -> Result<()> {
    std::fs::write(path, format_pose(pose)).with_context(|| format!("writing {}", path.display()))
}

pub fn read_pose(path: &Path) -> Result<RigidPose> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_pose(&text).with_context(|| format!("parsing {}", path.display()))
}
