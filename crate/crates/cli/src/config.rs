//! Optional TOML run configuration. Values apply on top of the built-in
//! defaults and are overridden by command-line flags.
//!
//! ```toml
//! seed = 7
//!
//! [phantom]
//! skew_euler_deg = [10, 0, 0]
//! noise_amplitude = 300
//!
//! [network]
//! c0 = 4
//!
//! [train]
//! iterations = 100
//! learning_rate = 0.01
//!
//! [segment]
//! lo = -300
//! hi = 300
//!
//! [infer]
//! stride = 24
//!
//! [calibration]
//! l0_mm = 0.1
//! ```

use std::path::Path;

use anyhow::{bail, Context, Result};
use lsccal::calibration::CalibrationConfig;
use lsccal::nn3d::NetworkConfig;
use lsccal::phantom::PhantomSpec;
use lsccal::pipeline::{InferConfig, TrainConfig};
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub phantom: toml::Table,
    pub network: Option<NetworkConfig>,
    #[serde(default)]
    pub train: toml::Table,
    pub segment: Option<SegmentSection>,
    pub infer: Option<InferConfig>,
    pub calibration: Option<CalibrationConfig>,
}

#[derive(Debug, Default, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentSection {
    pub lo: Option<f32>,
    pub hi: Option<f32>,
}

#[derive(Debug, Deserialize)]
struct OptimSection {
    #[serde(default = "default_lr")]
    learning_rate: f64,
}

fn default_lr() -> f64 {
    lsccal::nn3d::AdamConfig::default().lr
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Applies the `[phantom]` table through [`PhantomSpec::set`].
    pub fn apply_phantom(&self, spec: &mut PhantomSpec) -> Result<()> {
        for (key, value) in &self.phantom {
            let text = toml_scalar_list(value).with_context(|| format!("phantom.{key}"))?;
            if !spec.set(key, &text)? {
                bail!("unknown phantom field '{key}'");
            }
        }
        Ok(())
    }

    /// Training settings and learning rate from `[train]`.
    pub fn train(&self) -> Result<(TrainConfig, f64)> {
        let table = toml::Value::Table(self.train.clone());
        let mut core = self.train.clone();
        core.remove("learning_rate");
        let cfg: TrainConfig = toml::Value::Table(core).try_into().context("parsing [train]")?;
        let optim: OptimSection = table.try_into().context("parsing [train]")?;
        Ok((cfg, optim.learning_rate))
    }
}

fn toml_scalar_list(value: &toml::Value) -> Result<String> {
    Ok(match value {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Array(items) => items.iter().map(toml_scalar_list).collect::<Result<Vec<_>>>()?.join(","),
        other => bail!("unsupported value {other}"),
    })
}
