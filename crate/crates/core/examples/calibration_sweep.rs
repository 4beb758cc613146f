//! Calibrates seeded skewed phantoms and prints the per-case table.
//!
//! Usage: `calibration_sweep [cases] [max_skew_deg] [noise_fraction] [exact|threshold]`

use lsccal::pipeline::{run_batch, BatchConfig, MaskSource};

fn main() -> lsccal::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize| args.get(i).map(String::as_str);
    let mut cfg = BatchConfig::default();
    if let Some(v) = arg(1) {
        cfg.cases = v.parse().expect("cases");
    }
    if let Some(v) = arg(2) {
        cfg.max_skew_deg = v.parse().expect("max_skew_deg");
    }
    if let Some(v) = arg(3) {
        cfg.noise_fraction = v.parse().expect("noise_fraction");
    }
    if arg(4) == Some("threshold") {
        cfg.source = MaskSource::Threshold;
    }
    print!("{}", run_batch(&cfg)?.table());
    Ok(())
}
