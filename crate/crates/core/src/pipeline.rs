//! End-to-end operations behind the command line tool: threshold
//! segmentation, the training loop, sliding-window inference, evaluation and
//! the seeded phantom batch harness.

use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate, keep_largest, pose_error, split_components, CalibrationConfig, Rank};
use crate::geometry::RigidPose;
use crate::losses::{dice_from_counts, dsc_labels, dsc_metric, joint_loss_batch, CeMode, JointLoss};
use crate::nn3d::{Adam, Batch, MffNet, Mode, Parameters, Tensor4};
use crate::phantom::{generate_phantom, sample_training_pair, AugmentConfig, PhantomSpec};
use crate::volume::{normalize_values, LabelMask, Volume, CUBOID_SIDE, DEFAULT_WINDOW};
use crate::{Error, Result};

/// Canal components kept after segmentation.
pub const CANAL_COMPONENTS: usize = 2;
pub const INFER_STRIDE: usize = 24;
pub const INFER_THRESHOLD: f32 = 0.5;

/// Voxels with intensity in `[lo, hi]`, reduced to the two largest components.
pub fn segment_threshold(vol: &Volume, lo: f32, hi: f32) -> Result<LabelMask> {
    if !(lo <= hi) {
        return Err(Error::Invalid(format!("threshold band [{lo}, {hi}] is empty")));
    }
    let labels = vol.voxels().iter().map(|&v| (lo <= v && v <= hi) as u8).collect();
    let mask = keep_largest(&LabelMask::new(*vol.grid(), labels)?, CANAL_COMPONENTS);
    if mask.count() == 0 {
        return Err(Error::EmptySegmentation(format!("threshold band [{lo}, {hi}]")));
    }
    Ok(mask)
}

/// Intensity band centered on the canal value, half the intensity gap wide on each side.
pub fn canal_band(spec: &PhantomSpec) -> (f32, f32) {
    let half = spec.intensity_gap() / 2.0;
    (spec.canal_intensity - half, spec.canal_intensity + half)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub ce_mode: CeMode,
    /// Intensity window mapped onto `[0, 1]`.
    pub window: (f32, f32),
    pub max_rotation_deg: f64,
    pub foreground_probability: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let aug = AugmentConfig::default();
        Self {
            iterations: 200,
            batch_size: 2,
            seed: 0,
            ce_mode: CeMode::Balanced,
            window: DEFAULT_WINDOW,
            max_rotation_deg: aug.max_rotation_deg,
            foreground_probability: aug.foreground_probability,
        }
    }
}

impl TrainConfig {
    fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            max_rotation_deg: self.max_rotation_deg,
            foreground_probability: self.foreground_probability,
            ..Default::default()
        }
    }
}

fn cuboid_tensor(values: Vec<f32>) -> Result<Tensor4<f32>> {
    Ok(Tensor4::from_vec([1, CUBOID_SIDE, CUBOID_SIDE, CUBOID_SIDE], values)?)
}

/// One optimizer step on a batch. A non-finite loss aborts before any
/// parameter changes.
pub fn train_step(
    net: &mut MffNet<f32>,
    adam: &mut Adam,
    inputs: Batch<f32>,
    targets: &[Tensor4<f32>],
    ce_mode: CeMode,
    iteration: usize,
) -> Result<JointLoss> {
    let out = net.forward(inputs, Mode::Train)?;
    let lambda = net.config.lambda;
    let (loss, grad_main, grad_aux) = joint_loss_batch(&out, targets, &lambda, ce_mode)?;
    if !loss.is_finite() {
        return Err(Error::Diverged { iteration });
    }
    net.zero_grad();
    net.backward(grad_main, grad_aux)?;
    adam.step(net);
    Ok(loss)
}

/// Seeded training on random augmented cuboids drawn from `data`.
/// `on_iteration` sees every loss as it is produced.
pub fn train(
    net: &mut MffNet<f32>,
    adam: &mut Adam,
    data: &[(Volume, LabelMask)],
    cfg: &TrainConfig,
    mut on_iteration: impl FnMut(usize, &JointLoss),
) -> Result<Vec<JointLoss>> {
    if data.is_empty() {
        return Err(Error::Invalid("no training volumes".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Invalid("batch size must be at least 1".into()));
    }
    let augment = cfg.augment();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let mut inputs = Vec::with_capacity(cfg.batch_size);
        let mut targets = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (vol, mask) = &data[rng.gen_range(0..data.len())];
            let pair = sample_training_pair(vol, mask, rng.gen(), &augment)?;
            inputs.push(cuboid_tensor(normalize_values(&pair.image.values, cfg.window)?)?);
            targets.push(cuboid_tensor(pair.labels.values.iter().map(|&l| l as f32).collect())?);
        }
        let loss = train_step(net, adam, inputs, &targets, cfg.ce_mode, it)?;
        on_iteration(it, &loss);
        history.push(loss);
    }
    Ok(history)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    pub window: (f32, f32),
    pub stride: usize,
    pub threshold: f32,
    pub keep_components: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { window: DEFAULT_WINDOW, stride: INFER_STRIDE, threshold: INFER_THRESHOLD, keep_components: CANAL_COMPONENTS }
    }
}

/// Window starts covering `0..n`; the last window is aligned to the end.
pub fn window_starts(n: usize, side: usize, stride: usize) -> Vec<usize> {
    if n <= side {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..=n - side).step_by(stride.max(1)).collect();
    if *starts.last().unwrap() != n - side {
        starts.push(n - side);
    }
    starts
}

/// Foreground probability per voxel from overlapping 48³ windows, averaged
/// where windows overlap. Volumes smaller than a window are padded with air.
pub fn predict_probabilities(net: &mut MffNet<f32>, vol: &Volume, cfg: &InferConfig) -> Result<Volume> {
    let grid = *vol.grid();
    let dims = grid.dims;
    let air = vol.min_value();
    let starts = dims.map(|n| window_starts(n, CUBOID_SIDE, cfg.stride));
    let mut sum = vec![0f64; grid.len()];
    let mut hits = vec![0u32; grid.len()];
    let side = CUBOID_SIDE;
    for &z0 in &starts[2] {
        for &y0 in &starts[1] {
            for &x0 in &starts[0] {
                let mut window = Vec::with_capacity(side.pow(3));
                for k in 0..side {
                    for j in 0..side {
                        for i in 0..side {
                            let (x, y, z) = (x0 + i, y0 + j, z0 + k);
                            let inside = x < dims[0] && y < dims[1] && z < dims[2];
                            window.push(if inside { vol.get(x, y, z) } else { air });
                        }
                    }
                }
                let input = cuboid_tensor(normalize_values(&window, cfg.window)?)?;
                let out = net.forward(vec![input], Mode::Eval)?;
                let p = out.main[0].data();
                for k in 0..side.min(dims[2] - z0) {
                    for j in 0..side.min(dims[1] - y0) {
                        for i in 0..side.min(dims[0] - x0) {
                            let l = grid.linear(x0 + i, y0 + j, z0 + k);
                            sum[l] += p[i + side * (j + side * k)] as f64;
                            hits[l] += 1;
                        }
                    }
                }
            }
        }
    }
    let probs = sum.iter().zip(&hits).map(|(&s, &h)| (s / h as f64) as f32).collect();
    Ok(Volume::new(grid, probs)?)
}

/// Sliding-window prediction kept where the probability exceeds the threshold,
/// reduced to the largest components.
/// May be empty; callers decide whether that is an error.
pub fn infer(net: &mut MffNet<f32>, vol: &Volume, cfg: &InferConfig) -> Result<LabelMask> {
    let probs = predict_probabilities(net, vol, cfg)?;
    let labels = probs.voxels().iter().map(|&p| (p > cfg.threshold) as u8).collect();
    Ok(keep_largest(&LabelMask::new(*vol.grid(), labels)?, cfg.keep_components))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub dsc: f64,
    /// Left and right canal Dice, when both masks split into two components.
    pub component_dsc: Option<[f64; 2]>,
    pub predicted_voxels: usize,
    pub truth_voxels: usize,
    pub rank: Option<Rank>,
    pub rotation_error_deg: Option<f64>,
    pub translation_error_mm: Option<f64>,
    pub warnings: Vec<String>,
}

impl Evaluation {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("evaluation serializes")
    }
}

fn component_dsc(pred: &LabelMask, truth: &LabelMask) -> Option<[f64; 2]> {
    let (pl, pr) = split_components(pred, 1).ok()?;
    let (tl, tr) = split_components(truth, 1).ok()?;
    let dice = |a: &crate::calibration::Component, b: &crate::calibration::Component| {
        let set: std::collections::HashSet<_> = a.voxels.iter().collect();
        let common = b.voxels.iter().filter(|v| set.contains(v)).count();
        dice_from_counts(a.len(), b.len(), common)
    };
    Some([dice(&pl, &tl), dice(&pr, &tr)])
}

/// Overlap metrics of a prediction against ground truth.
pub fn evaluate_masks(pred: &LabelMask, truth: &LabelMask) -> Result<Evaluation> {
    let dsc = dsc_metric(pred, truth)?;
    let mut warnings = Vec::new();
    if pred.count() == 0 {
        warnings.push("prediction is empty".to_string());
    }
    if truth.count() == 0 {
        warnings.push("ground truth is empty".to_string());
    }
    Ok(Evaluation {
        dsc,
        component_dsc: component_dsc(pred, truth),
        predicted_voxels: pred.count(),
        truth_voxels: truth.count(),
        rank: None,
        rotation_error_deg: None,
        translation_error_mm: None,
        warnings,
    })
}

/// Where the batch harness gets its canal masks from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSource {
    /// The phantom's analytic mask.
    #[default]
    Exact,
    /// [`segment_threshold`] with [`canal_band`].
    Threshold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchConfig {
    pub cases: usize,
    pub first_seed: u64,
    /// Skew angles are uniform in `[-max, max]` degrees per axis.
    pub max_skew_deg: f64,
    /// Skew translations are uniform in `[-max, max)` mm per axis.
    pub max_translation_mm: f64,
    /// Noise amplitude as a fraction of the phantom intensity gap.
    pub noise_fraction: f32,
    pub source: MaskSource,
    pub calibration: CalibrationConfig,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            cases: 20,
            first_seed: 0,
            max_skew_deg: 15.0,
            max_translation_mm: 2.0,
            noise_fraction: 0.0,
            source: MaskSource::Exact,
            calibration: CalibrationConfig::default(),
        }
    }
}

/// Default phantom under a random skew drawn from `seed`.
pub fn skewed_phantom_spec(seed: u64, max_deg: f64, max_translation_mm: f64, noise_fraction: f32) -> PhantomSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut angle = || if max_deg > 0.0 { rng.gen_range(-max_deg..=max_deg) } else { 0.0 };
    let (x, y, z) = (angle(), angle(), angle());
    let t = max_translation_mm;
    let mut shift = || if t > 0.0 { rng.gen_range(-t..t) } else { 0.0 };
    let translation = Vector3::new(shift(), shift(), shift());
    let mut spec = PhantomSpec { skew: RigidPose::from_euler_deg(x, y, z, translation), seed, ..Default::default() };
    spec.noise_amplitude = noise_fraction * spec.intensity_gap();
    spec
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub seed: u64,
    pub skew_deg: [f64; 3],
    pub rank: Rank,
    pub segmentation_dsc: Option<f64>,
    pub rotation_error_deg: Option<f64>,
    pub translation_error_mm: Option<f64>,
    pub centroid_gap_slices: Option<f64>,
    pub mirror_dsc: Option<f64>,
    pub seconds: f64,
    pub failure: Option<String>,
}

/// Generates, segments and calibrates one seeded phantom. Calibration
/// failures are reported in the result rather than returned as errors.
pub fn run_case(seed: u64, cfg: &BatchConfig) -> Result<CaseResult> {
    let spec = skewed_phantom_spec(seed, cfg.max_skew_deg, cfg.max_translation_mm, cfg.noise_fraction);
    let (vol, truth_mask, truth) = generate_phantom(&spec)?;
    let start = Instant::now();
    let mut result = CaseResult {
        seed,
        skew_deg: spec.skew.euler_deg(),
        rank: Rank::Failed,
        segmentation_dsc: None,
        rotation_error_deg: None,
        translation_error_mm: None,
        centroid_gap_slices: None,
        mirror_dsc: None,
        seconds: 0.0,
        failure: None,
    };
    let mask = match cfg.source {
        MaskSource::Exact => truth_mask,
        MaskSource::Threshold => {
            let (lo, hi) = canal_band(&spec);
            match segment_threshold(&vol, lo, hi) {
                Ok(m) => {
                    result.segmentation_dsc = Some(dsc_labels(m.labels(), truth_mask.labels()));
                    m
                }
                Err(e) => {
                    result.failure = Some(e.to_string());
                    result.seconds = start.elapsed().as_secs_f64();
                    return Ok(result);
                }
            }
        }
    };
    match calibrate(&vol, &mask, &cfg.calibration) {
        Ok(cal) => {
            let (deg, mm) = pose_error(&cal.pose, &truth);
            result.rank = cal.report.rank;
            result.rotation_error_deg = Some(deg);
            result.translation_error_mm = Some(mm);
            result.centroid_gap_slices = cal.report.centroid_gap_slices;
            result.mirror_dsc = cal.report.mirror_dsc;
        }
        Err(e) => result.failure = Some(e.to_string()),
    }
    result.seconds = start.elapsed().as_secs_f64();
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub cases: Vec<CaseResult>,
}

impl BatchSummary {
    /// Case counts per rank: Excellent, Good, Failed.
    pub fn rank_counts(&self) -> [usize; 3] {
        let count = |r: Rank| self.cases.iter().filter(|c| c.rank == r).count();
        [count(Rank::Excellent), count(Rank::Good), count(Rank::Failed)]
    }

    /// Per-case rows followed by rank counts and percentages.
    pub fn table(&self) -> String {
        let mut out = String::from("seed  rank       rot_err_deg  trans_err_mm  gap_slices  mirror_dsc\n");
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
        for c in &self.cases {
            out.push_str(&format!(
                "{:<5} {:<10} {:>11}  {:>12}  {:>10}  {:>10}\n",
                c.seed,
                c.rank.to_string(),
                opt(c.rotation_error_deg),
                opt(c.translation_error_mm),
                opt(c.centroid_gap_slices),
                opt(c.mirror_dsc)
            ));
        }
        let n = self.cases.len().max(1) as f64;
        let [e, g, f] = self.rank_counts();
        out.push_str("\nrank       cases  percent\n");
        for (name, k) in [("Excellent", e), ("Good", g), ("Failed", f)] {
            out.push_str(&format!("{name:<10} {k:>5}  {:>6.2}%\n", 100.0 * k as f64 / n));
        }
        out
    }
}

pub fn run_batch(cfg: &BatchConfig) -> Result<BatchSummary> {
    let cases = (0..cfg.cases as u64)
        .map(|i| run_case(cfg.first_seed + i, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(BatchSummary { cases })
}
