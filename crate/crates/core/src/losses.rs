//! Dice and class-weighted cross-entropy losses with analytic gradients, the
//! deep-supervision joint loss, and the Dice metric on label masks.
//!
//! All reductions run sequentially in `f64` so results are reproducible bit for bit.

use crate::nn3d::{MffOutput, NnError, Real, Tensor4};
use crate::volume::{LabelMask, VolumeError};

/// Additive smoothing of the Dice loss numerator and denominator.
pub const DICE_SMOOTH: f64 = 1.0;
/// Probabilities are clamped to `[CE_CLAMP, 1 - CE_CLAMP]` before taking logs.
pub const CE_CLAMP: f64 = 1e-7;

/// Predicted foreground probabilities paired with binary ground truth.
#[derive(Debug, Clone, Copy)]
pub struct VoxelPrediction<'a, T> {
    pub p: &'a [T],
    pub g: &'a [T],
}

impl<'a, T: Real> VoxelPrediction<'a, T> {
    /// Checks equal lengths, finite `p` in `[0, 1]` and binary `g`.
    pub fn new(p: &'a [T], g: &'a [T]) -> Result<Self, NnError> {
        if p.len() != g.len() {
            return Err(NnError::Shape(format!("{} predictions for {} labels", p.len(), g.len())));
        }
        if let Some(v) = p.iter().find(|v| !(v.f64() >= 0.0 && v.f64() <= 1.0)) {
            return Err(NnError::Shape(format!("probability {} outside [0, 1]", v.f64())));
        }
        if let Some(v) = g.iter().find(|v| v.f64() != 0.0 && v.f64() != 1.0) {
            return Err(NnError::Shape(format!("label {} is not binary", v.f64())));
        }
        Ok(Self { p, g })
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    /// Foreground voxel count of the ground truth.
    pub fn foreground(&self) -> usize {
        self.g.iter().filter(|v| v.f64() > 0.5).count()
    }
}

/// How background voxels enter the cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CeMode {
    /// Foreground weighted by `W`, background by `1 - W`.
    #[default]
    Balanced,
    /// Only foreground terms, weighted by `W`; background contributes nothing.
    Strict,
}

/// Dice loss `1 - (2Σpg + s) / (Σp + Σg + s)`, with `s` = [`DICE_SMOOTH`].
pub fn dsc_loss<T: Real>(pred: VoxelPrediction<'_, T>) -> f64 {
    dsc_loss_smoothed(pred, DICE_SMOOTH).0
}

/// Dice loss and its gradient with respect to `p` for an arbitrary smoothing term.
/// With `smooth = 0` and both sums zero the loss is defined as 0.
pub fn dsc_loss_smoothed<T: Real>(pred: VoxelPrediction<'_, T>, smooth: f64) -> (f64, Vec<f64>) {
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (p, g) in pred.p.iter().zip(pred.g) {
        let (p, g) = (p.f64(), g.f64());
        inter += p * g;
        sp += p;
        sg += g;
    }
    let num = 2.0 * inter + smooth;
    let den = sp + sg + smooth;
    if den == 0.0 {
        return (0.0, vec![0.0; pred.len()]);
    }
    let grad = pred.g.iter().map(|g| -(2.0 * g.f64() * den - num) / (den * den)).collect();
    (1.0 - num / den, grad)
}

/// Dice loss and gradient with the default smoothing.
pub fn dsc_loss_grad<T: Real>(pred: VoxelPrediction<'_, T>) -> (f64, Vec<f64>) {
    dsc_loss_smoothed(pred, DICE_SMOOTH)
}

/// `W = 1 - N_k / N_c`: one minus the foreground fraction of the sub-volume.
pub fn class_weight(foreground: usize, total: usize) -> f64 {
    if total == 0 {
        return 1.0;
    }
    1.0 - foreground as f64 / total as f64
}

/// Class weight of a label cuboid.
pub fn class_weight_of<T: Real>(labels: &[T]) -> f64 {
    class_weight(labels.iter().filter(|v| v.f64() > 0.5).count(), labels.len())
}

/// Weighted binary cross-entropy, averaged over voxels.
pub fn weighted_ce<T: Real>(pred: VoxelPrediction<'_, T>, w: f64, mode: CeMode) -> f64 {
    weighted_ce_grad(pred, w, mode).0
}

/// Weighted cross-entropy and its gradient with respect to `p`. The gradient
/// is zero where the clamp is active.
pub fn weighted_ce_grad<T: Real>(pred: VoxelPrediction<'_, T>, w: f64, mode: CeMode) -> (f64, Vec<f64>) {
    let n = pred.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let wb = match mode {
        CeMode::Balanced => 1.0 - w,
        CeMode::Strict => 0.0,
    };
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(n);
    for (p, g) in pred.p.iter().zip(pred.g) {
        let (p, g) = (p.f64(), g.f64());
        let q = p.clamp(CE_CLAMP, 1.0 - CE_CLAMP);
        let inside = p > CE_CLAMP && p < 1.0 - CE_CLAMP;
        let (fg, bg) = (w * g, wb * (1.0 - g));
        total -= fg * q.ln() + bg * (1.0 - q).ln();
        grad.push(if inside { -inv_n * (fg / q - bg / (1.0 - q)) } else { 0.0 });
    }
    (total * inv_n, grad)
}

/// Per-term breakdown of the joint loss, averaged over the batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct JointLoss {
    pub dsc_main: f64,
    pub ce_main: f64,
    pub dsc_aux: Vec<f64>,
    pub ce_aux: Vec<f64>,
    pub total: f64,
}

impl JointLoss {
    /// CSV header for training logs with `m` aux heads.
    pub fn csv_header(m: usize) -> String {
        let mut cols = vec!["iteration".to_string(), "dsc_main".into(), "ce_main".into()];
        for k in 0..m {
            cols.push(format!("dsc_aux{}", k + 1));
            cols.push(format!("ce_aux{}", k + 1));
        }
        cols.push("total".into());
        cols.join(",")
    }

    pub fn csv_row(&self, iteration: usize) -> String {
        let mut cols = vec![iteration.to_string(), format!("{:.9}", self.dsc_main), format!("{:.9}", self.ce_main)];
        for (d, c) in self.dsc_aux.iter().zip(&self.ce_aux) {
            cols.push(format!("{d:.9}"));
            cols.push(format!("{c:.9}"));
        }
        cols.push(format!("{:.9}", self.total));
        cols.join(",")
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

/// Joint loss for one sample: main Dice + Σλ_k Dice_k + main CE + Σλ_k CE_k.
/// Returns the breakdown and gradients for the main and each aux prediction.
pub fn joint_loss<T: Real>(
    main: &[T],
    aux: &[&[T]],
    target: &[T],
    lambda: &[f64],
    mode: CeMode,
) -> Result<(JointLoss, Vec<f64>, Vec<Vec<f64>>), NnError> {
    if aux.len() != lambda.len() {
        return Err(NnError::Shape(format!("{} aux predictions for {} lambda weights", aux.len(), lambda.len())));
    }
    let w = class_weight_of(target);
    let head = |p: &[T]| -> Result<(f64, f64, Vec<f64>), NnError> {
        let pred = VoxelPrediction::new(p, target)?;
        let (d, gd) = dsc_loss_grad(pred);
        let (c, gc) = weighted_ce_grad(pred, w, mode);
        Ok((d, c, gd.iter().zip(&gc).map(|(a, b)| a + b).collect()))
    };
    let (dsc_main, ce_main, grad_main) = head(main)?;
    let mut out = JointLoss { dsc_main, ce_main, total: dsc_main + ce_main, ..Default::default() };
    let mut grad_aux = Vec::with_capacity(aux.len());
    for (p, &l) in aux.iter().zip(lambda) {
        let (d, c, g) = head(p)?;
        out.dsc_aux.push(d);
        out.ce_aux.push(c);
        out.total += l * d + l * c;
        grad_aux.push(g.into_iter().map(|v| v * l).collect());
    }
    Ok((out, grad_main, grad_aux))
}

/// Batch-averaged joint loss over network outputs, with gradients shaped like the outputs.
pub fn joint_loss_batch<T: Real>(
    output: &MffOutput<T>,
    targets: &[Tensor4<T>],
    lambda: &[f64],
    mode: CeMode,
) -> Result<(JointLoss, Vec<Tensor4<T>>, Vec<Vec<Tensor4<T>>>), NnError> {
    let n = targets.len();
    if output.main.len() != n || output.aux.iter().any(|a| a.len() != n) || n == 0 {
        return Err(NnError::Shape("batch sizes of outputs and targets differ".into()));
    }
    let scale = 1.0 / n as f64;
    let m = output.aux.len();
    let mut sum = JointLoss { dsc_aux: vec![0.0; m], ce_aux: vec![0.0; m], ..Default::default() };
    let mut grad_main = Vec::with_capacity(n);
    let mut grad_aux: Vec<Vec<Tensor4<T>>> = vec![Vec::with_capacity(n); m];
    let to_tensor = |shape, g: Vec<f64>| Tensor4::from_vec(shape, g.into_iter().map(|v| T::of(v * scale)).collect());
    for (i, t) in targets.iter().enumerate() {
        let main = &output.main[i];
        if main.shape() != t.shape() {
            return Err(NnError::Shape(format!("prediction {:?} vs target {:?}", main.shape(), t.shape())));
        }
        let aux: Vec<&[T]> = output.aux.iter().map(|a| a[i].data()).collect();
        let (l, gm, ga) = joint_loss(main.data(), &aux, t.data(), lambda, mode)?;
        sum.dsc_main += l.dsc_main * scale;
        sum.ce_main += l.ce_main * scale;
        for k in 0..m {
            sum.dsc_aux[k] += l.dsc_aux[k] * scale;
            sum.ce_aux[k] += l.ce_aux[k] * scale;
        }
        sum.total += l.total * scale;
        grad_main.push(to_tensor(t.shape(), gm)?);
        for (k, g) in ga.into_iter().enumerate() {
            grad_aux[k].push(to_tensor(t.shape(), g)?);
        }
    }
    Ok((sum, grad_main, grad_aux))
}

/// Dice coefficient from set sizes; 1 when both sets are empty.
pub fn dice_from_counts(a: usize, b: usize, intersection: usize) -> f64 {
    if a + b == 0 {
        return 1.0;
    }
    2.0 * intersection as f64 / (a + b) as f64
}

/// Dice coefficient `2|P∩G| / (|P| + |G|)` of two binary label arrays.
pub fn dsc_labels(a: &[u8], b: &[u8]) -> f64 {
    let (mut na, mut nb, mut both) = (0, 0, 0);
    for (&x, &y) in a.iter().zip(b) {
        na += (x != 0) as usize;
        nb += (y != 0) as usize;
        both += (x != 0 && y != 0) as usize;
    }
    dice_from_counts(na, nb, both)
}

/// Dice coefficient of two congruent masks.
pub fn dsc_metric(a: &LabelMask, b: &LabelMask) -> Result<f64, VolumeError> {
    a.ensure_congruent(b.grid())?;
    Ok(dsc_labels(a.labels(), b.labels()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred<'a>(p: &'a [f64], g: &'a [f64]) -> VoxelPrediction<'a, f64> {
        VoxelPrediction::new(p, g).unwrap()
    }

    #[test]
    fn dice_examples() {
        assert_eq!(dsc_loss(pred(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0])), 0.0);
        let n = 10;
        let l = dsc_loss(pred(&vec![1.0; n], &vec![0.0; n]));
        assert!((l - (1.0 - 1.0 / (n as f64 + 1.0))).abs() < 1e-12);
        assert_eq!(dsc_loss_smoothed(pred(&vec![1.0; n], &vec![0.0; n]), 0.0).0, 1.0);
        assert_eq!(dsc_loss_smoothed(pred(&[0.5, 0.5], &[1.0, 0.0]), 0.0).0, 0.5);
        assert_eq!(dsc_loss(pred(&[0.0; 4], &[0.0; 4])), 0.0);
    }

    #[test]
    fn class_weight_examples() {
        assert_eq!(class_weight(0, 110_592), 1.0);
        assert_eq!(class_weight(110_592, 110_592), 0.0);
        assert!((class_weight(553, 110_592) - 0.99500).abs() < 5e-6);
    }

    #[test]
    fn ce_examples() {
        assert!((weighted_ce(pred(&[0.5], &[1.0]), 1.0, CeMode::Balanced) - std::f64::consts::LN_2).abs() < 1e-12);
        let ones = [1.0; 8];
        assert!(weighted_ce(pred(&ones, &ones), class_weight_of(&ones), CeMode::Balanced).abs() < 1e-12);
        // strict mode ignores background entirely
        assert_eq!(weighted_ce(pred(&[0.9, 0.2], &[0.0, 0.0]), 0.7, CeMode::Strict), 0.0);
        assert!(weighted_ce(pred(&[0.9, 0.2], &[0.0, 0.0]), 0.7, CeMode::Balanced) > 0.0);
    }

    #[test]
    fn prediction_validation() {
        assert!(VoxelPrediction::new(&[0.5f64], &[1.0, 0.0]).is_err());
        assert!(VoxelPrediction::new(&[1.5f64], &[1.0]).is_err());
        assert!(VoxelPrediction::new(&[f64::NAN], &[1.0]).is_err());
        assert!(VoxelPrediction::new(&[0.5f64], &[0.5]).is_err());
    }

    #[test]
    fn joint_loss_reductions() {
        let p = [0.2, 0.7, 0.9, 0.1];
        let g = [0.0, 1.0, 1.0, 0.0];
        let a1 = [0.3, 0.3, 0.6, 0.5];
        let a2 = [0.8, 0.4, 0.5, 0.2];
        let (base, _, _) = joint_loss(&p, &[], &g, &[], CeMode::Balanced).unwrap();
        let w = class_weight_of(&g);
        let expect = dsc_loss(pred(&p, &g)) + weighted_ce(pred(&p, &g), w, CeMode::Balanced);
        assert_eq!(base.total, expect);
        let (zero, _, _) = joint_loss(&p, &[&a1, &a2], &g, &[0.0, 0.0], CeMode::Balanced).unwrap();
        assert_eq!(zero.total, base.total);
        let (full, _, ga) = joint_loss(&p, &[&a1, &a2], &g, &[0.5, 0.25], CeMode::Balanced).unwrap();
        let hand = expect
            + 0.5 * dsc_loss(pred(&a1, &g))
            + 0.25 * dsc_loss(pred(&a2, &g))
            + 0.5 * weighted_ce(pred(&a1, &g), w, CeMode::Balanced)
            + 0.25 * weighted_ce(pred(&a2, &g), w, CeMode::Balanced);
        assert!((full.total - hand).abs() < 1e-12);
        assert_eq!(ga.len(), 2);
        assert!(joint_loss(&p, &[&a1], &g, &[0.5, 0.25], CeMode::Balanced).is_err());
    }

    #[test]
    fn metric_examples() {
        let mut a = vec![0u8; 1000];
        let mut b = vec![0u8; 1000];
        assert_eq!(dsc_labels(&a, &b), 1.0);
        a[..200].fill(1);
        b[50..350].fill(1);
        assert!((dsc_labels(&a, &b) - 0.6).abs() < 1e-12);
        assert_eq!(dsc_labels(&a, &a), 1.0);
        let mut c = vec![0u8; 1000];
        c[500..600].fill(1);
        assert_eq!(dsc_labels(&a, &c), 0.0);
    }

    #[test]
    fn csv_layout() {
        assert_eq!(JointLoss::csv_header(2), "iteration,dsc_main,ce_main,dsc_aux1,ce_aux1,dsc_aux2,ce_aux2,total");
        let l = JointLoss { dsc_aux: vec![0.5], ce_aux: vec![0.25], total: 1.0, ..Default::default() };
        assert_eq!(l.csv_row(3).split(',').count(), 6);
    }
}
