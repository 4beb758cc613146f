use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use lsccal::calibration::{calibrate, pose_error, CalibrationReport, Rank};
use lsccal::geometry::RigidPose;
use lsccal::losses::{CeMode, JointLoss};
use lsccal::nn3d::{read_checkpoint, write_checkpoint, Adam, AdamConfig, MffNet, AUX_HEADS};
use lsccal::phantom::{generate_phantom, PhantomSpec};
use lsccal::pipeline::{
    canal_band, evaluate_masks, infer, predict_probabilities, run_batch, segment_threshold, train, BatchConfig,
    MaskSource,
};
use lsccal::volume::{read_mvol, write_mvol, LabelMask, Volume};
use nalgebra::Vector3;

use crate::config::FileConfig;
use crate::pose::{read_pose, write_pose};
use crate::{
    CalibrateArgs, CeArg, Command, EvaluateArgs, InferArgs, PhantomArgs, SegmentArgs, SourceArg, TrainArgs,
};

/// Exit status when calibration ends with rank Failed.
const EXIT_RANK_FAILED: u8 = 2;

pub fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::SegmentThreshold(a) => cmd_segment_threshold(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    }
    .map(|()| ExitCode::SUCCESS)
    .or_else(|e| match e.downcast_ref::<RankFailed>() {
        Some(_) => Ok(ExitCode::from(EXIT_RANK_FAILED)),
        None => Err(e),
    })
}

/// Calibration finished but ranked Failed; the report is already written.
#[derive(Debug)]
struct RankFailed;

impl std::fmt::Display for RankFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("calibration rank Failed")
    }
}

impl std::error::Error for RankFailed {}

fn read_volume(path: &Path) -> Result<Volume> {
    read_mvol(path)?.into_volume().ok_or_else(|| anyhow!("{} holds a mask, expected a volume", path.display()))
}

fn read_mask(path: &Path) -> Result<LabelMask> {
    read_mvol(path)?.into_mask().ok_or_else(|| anyhow!("{} holds a volume, expected a mask", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_phantom(a: PhantomArgs) -> Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let mut spec = PhantomSpec::default();
    file.apply_phantom(&mut spec)?;
    if let Some(seed) = a.common.seed.or(file.seed) {
        spec.seed = seed;
    }
    for kv in &a.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got '{kv}'"))?;
        if !spec.set(k.trim(), v.trim())? {
            bail!("unknown phantom field '{}'", k.trim());
        }
    }
    if let Some(e) = &a.skew_euler {
        spec.skew = RigidPose::from_euler_deg(e[0], e[1], e[2], spec.skew.translation);
    }
    if let Some(t) = &a.skew_translation {
        spec.skew.translation = Vector3::new(t[0], t[1], t[2]);
    }
    if let Some(n) = a.noise {
        spec.noise_amplitude = n;
    }
    if let Some(f) = a.noise_fraction {
        spec.noise_amplitude = f * spec.intensity_gap();
    }
    let (vol, mask, pose) = generate_phantom(&spec)?;
    create_dir(&a.output)?;
    write_mvol(&vol.into(), a.output.join("volume.mvol"))?;
    write_mvol(&mask.into(), a.output.join("mask.mvol"))?;
    write_pose(&a.output.join("pose.txt"), &pose)?;
    write_text(&a.output.join("spec.txt"), &spec.to_text())
}

fn cmd_segment_threshold(a: SegmentArgs) -> Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let (lo, hi) = if let Some(path) = &a.band_from_spec {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        canal_band(&PhantomSpec::from_text(&text)?)
    } else {
        let seg = file.segment.unwrap_or_default();
        let lo = a.lo.or(seg.lo).ok_or_else(|| anyhow!("missing --lo (or segment.lo in the config)"))?;
        let hi = a.hi.or(seg.hi).ok_or_else(|| anyhow!("missing --hi (or segment.hi in the config)"))?;
        (lo, hi)
    };
    let vol = read_volume(&a.input)?;
    let mask = segment_threshold(&vol, lo, hi)?;
    write_mvol(&mask.into(), &a.output)?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let (mut cfg, mut lr) = file.train()?;
    if let Some(seed) = a.common.seed.or(file.seed) {
        cfg.seed = seed;
    }
    if let Some(v) = a.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        lr = v;
    }
    if let Some(ce) = a.ce {
        cfg.ce_mode = match ce {
            CeArg::Balanced => CeMode::Balanced,
            CeArg::Strict => CeMode::Strict,
        };
    }
    let data = a
        .input
        .iter()
        .map(|dir| Ok((read_volume(&dir.join("volume.mvol"))?, read_mask(&dir.join("mask.mvol"))?)))
        .collect::<Result<Vec<_>>>()?;

    let (mut net, mut adam) = match &a.resume {
        Some(path) => {
            let (net, adam) = read_checkpoint::<f32>(path)?;
            let mut adam = adam.unwrap_or_else(|| Adam::new(AdamConfig::default()));
            if a.learning_rate.is_some() {
                adam.config.lr = lr;
            }
            (net, adam)
        }
        None => {
            let mut config = file.network.clone().unwrap_or_default();
            if let Some(l) = &a.lambda {
                config.lambda = *l;
            }
            (MffNet::new(config, cfg.seed)?, Adam::new(AdamConfig { lr, ..Default::default() }))
        }
    };
    if let (Some(l), Some(_)) = (&a.lambda, &a.resume) {
        net.config.lambda = *l;
    }

    let log_path = a.log.clone().unwrap_or_else(|| a.output.with_extension("csv"));
    let log_file = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut log = BufWriter::new(log_file);
    writeln!(log, "{}", JointLoss::csv_header(AUX_HEADS))?;
    let mut io_error = None;
    let result = train(&mut net, &mut adam, &data, &cfg, |it, loss| {
        if let Err(e) = writeln!(log, "{}", loss.csv_row(it)) {
            io_error.get_or_insert(e);
        }
    });
    log.flush()?;
    if let Some(e) = io_error {
        return Err(e).context(format!("writing {}", log_path.display()));
    }
    result?;
    write_checkpoint(&a.output, &net, Some(&adam))?;
    Ok(())
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let mut cfg = file.infer.unwrap_or_default();
    if let Some(s) = a.stride {
        cfg.stride = s;
    }
    if let Some(t) = a.threshold {
        cfg.threshold = t;
    }
    if cfg.stride == 0 {
        bail!("stride must be at least 1");
    }
    let (mut net, _) = read_checkpoint::<f32>(&a.checkpoint)?;
    let vol = read_volume(&a.input)?;
    if let Some(path) = &a.probabilities {
        write_mvol(&predict_probabilities(&mut net, &vol, &cfg)?.into(), path)?;
    }
    let mask = infer(&mut net, &vol, &cfg)?;
    if mask.count() == 0 {
        eprintln!("warning: empty segmentation: no voxel exceeded probability {}", cfg.threshold);
    }
    write_mvol(&mask.into(), &a.output)?;
    Ok(())
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let mut cfg = file.calibration.unwrap_or_default();
    if let Some(v) = a.l0 {
        cfg.l0_mm = v;
    }
    if let Some(v) = a.max_iter {
        cfg.max_iter = v;
    }
    if let Some(v) = a.spacing {
        cfg.spacing_mm = v;
    }
    cfg.validate()?;
    let vol = read_volume(&a.input)?;
    let mask = read_mask(&a.mask)?;
    create_dir(&a.output)?;
    let report_path = a.report.clone().unwrap_or_else(|| a.output.join("report.json"));
    let report = match calibrate(&vol, &mask, &cfg) {
        Ok(cal) => {
            write_mvol(&cal.volume.into(), a.output.join("volume.mvol"))?;
            write_mvol(&cal.mask.into(), a.output.join("mask.mvol"))?;
            write_pose(&a.output.join("pose.txt"), &cal.pose)?;
            cal.report
        }
        Err(e) => {
            eprintln!("error: {e}");
            CalibrationReport::failed(cfg.l0_mm, e.to_string())
        }
    };
    write_text(&report_path, &report.to_json())?;
    println!("rank: {}", report.rank);
    if report.rank == Rank::Failed {
        return Err(RankFailed.into());
    }
    Ok(())
}

fn report_rank(path: &Path) -> Result<Rank> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let rank = value.get("rank").cloned().ok_or_else(|| anyhow!("{} has no rank field", path.display()))?;
    Ok(serde_json::from_value(rank)?)
}

fn emit(output: Option<&PathBuf>, text: &str) -> Result<()> {
    match output {
        Some(path) => write_text(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    if let Some(cases) = a.batch {
        let cfg = BatchConfig {
            cases,
            first_seed: a.common.seed.or(file.seed).unwrap_or(0),
            max_skew_deg: a.max_skew,
            max_translation_mm: a.max_translation,
            noise_fraction: a.noise_fraction,
            source: match a.source {
                SourceArg::Exact => MaskSource::Exact,
                SourceArg::Threshold => MaskSource::Threshold,
            },
            calibration: file.calibration.unwrap_or_default(),
        };
        return emit(a.output.as_ref(), &run_batch(&cfg)?.table());
    }
    let (Some(input), Some(truth)) = (&a.input, &a.truth) else {
        bail!("--input and --truth are required without --batch");
    };
    let pred = read_mask(input)?;
    let truth = read_mask(truth)?;
    let mut eval = evaluate_masks(&pred, &truth)?;
    for w in &eval.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(path) = &a.report {
        eval.rank = Some(report_rank(path)?);
    }
    if let (Some(est), Some(gt)) = (&a.pose, &a.truth_pose) {
        let (deg, mm) = pose_error(&read_pose(est)?, &read_pose(gt)?);
        eval.rotation_error_deg = Some(deg);
        eval.translation_error_mm = Some(mm);
    }
    emit(a.output.as_ref(), &format!("{}\n", eval.to_json()))
}
