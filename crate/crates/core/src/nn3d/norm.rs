//! Batch normalization over (batch, spatial) per channel, ReLU and sigmoid.

use super::tensor::{ensure_same_shape, Param, Tensor4};
use super::{Mode, NnError, Real};

pub const BN_EPS: f64 = 1e-5;
/// Fraction of the previous running statistic kept on each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub eps: f64,
    pub momentum: f64,
}

/// Values kept from a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Vec<Tensor4<T>>,
    pub inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BnGrads<T> {
    pub input: Vec<Tensor4<T>>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(&[channels], T::one()),
            beta: Param::zeros(&[channels]),
            running_mean: Param::zeros(&[channels]),
            running_var: Param::filled(&[channels], T::one()),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, xs: &[Tensor4<T>]) -> Result<(), NnError> {
        let first = xs.first().ok_or_else(|| NnError::Shape("batch norm of an empty batch".into()))?;
        if first.channels() != self.channels() {
            return Err(NnError::Shape(format!(
                "batch norm has {} channels, input has {}",
                self.channels(),
                first.channels()
            )));
        }
        for x in xs {
            ensure_same_shape(x.shape(), first.shape())?;
        }
        Ok(())
    }

    /// Training mode normalizes with batch statistics and updates the
    /// running estimates; inference mode uses the running estimates.
    pub fn forward(&mut self, xs: &[Tensor4<T>], mode: Mode) -> Result<(Vec<Tensor4<T>>, Option<BnCache<T>>), NnError> {
        self.check(xs)?;
        match mode {
            Mode::Train => {
                let (out, cache, mean, var) = self.forward_batch_stats(xs);
                let m = self.momentum;
                for c in 0..self.channels() {
                    let rm = &mut self.running_mean.value[c];
                    *rm = T::of(m * rm.f64() + (1.0 - m) * mean[c]);
                    let rv = &mut self.running_var.value[c];
                    *rv = T::of(m * rv.f64() + (1.0 - m) * var[c]);
                }
                Ok((out, Some(cache)))
            }
            Mode::Eval => Ok((self.forward_eval(xs), None)),
        }
    }

    fn forward_batch_stats(&self, xs: &[Tensor4<T>]) -> (Vec<Tensor4<T>>, BnCache<T>, Vec<f64>, Vec<f64>) {
        let channels = self.channels();
        let count = (xs.len() * xs[0].spatial_len()) as f64;
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        for c in 0..channels {
            let s: f64 = xs.iter().flat_map(|x| x.channel(c)).map(|v| v.f64()).sum();
            mean[c] = s / count;
            let ss: f64 = xs.iter().flat_map(|x| x.channel(c)).map(|v| (v.f64() - mean[c]).powi(2)).sum();
            var[c] = ss / count;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(xs.len());
        let mut out = Vec::with_capacity(xs.len());
        for x in xs {
            let mut h = x.clone();
            let mut y = x.clone();
            for c in 0..channels {
                let (mu, is) = (mean[c], inv_std[c]);
                let (g, b) = (self.gamma.value[c].f64(), self.beta.value[c].f64());
                for (hv, yv) in h.channel_mut(c).iter_mut().zip(y.channel_mut(c)) {
                    let n = (hv.f64() - mu) * is;
                    *hv = T::of(n);
                    *yv = T::of(n * g + b);
                }
            }
            xhat.push(h);
            out.push(y);
        }
        (out, BnCache { xhat, inv_std }, mean, var)
    }

    pub fn forward_eval(&self, xs: &[Tensor4<T>]) -> Vec<Tensor4<T>> {
        xs.iter()
            .map(|x| {
                let mut y = x.clone();
                for c in 0..self.channels() {
                    let is = 1.0 / (self.running_var.value[c].f64() + self.eps).sqrt();
                    let scale = T::of(self.gamma.value[c].f64() * is);
                    let shift = T::of(self.beta.value[c].f64() - self.running_mean.value[c].f64() * self.gamma.value[c].f64() * is);
                    for v in y.channel_mut(c) {
                        *v = *v * scale + shift;
                    }
                }
                y
            })
            .collect()
    }

    /// Gradients of the training-mode forward pass.
    pub fn backward(&self, cache: &BnCache<T>, grad_out: &[Tensor4<T>]) -> Result<BnGrads<T>, NnError> {
        if grad_out.len() != cache.xhat.len() {
            return Err(NnError::Shape("batch size differs from forward pass".into()));
        }
        for (g, h) in grad_out.iter().zip(&cache.xhat) {
            ensure_same_shape(g.shape(), h.shape())?;
        }
        let channels = self.channels();
        let count = (grad_out.len() * grad_out[0].spatial_len()) as f64;
        let mut dgamma = vec![T::zero(); channels];
        let mut dbeta = vec![T::zero(); channels];
        let mut input: Vec<Tensor4<T>> = grad_out.to_vec();
        for c in 0..channels {
            let mut sum_g = 0.0;
            let mut sum_gh = 0.0;
            for (g, h) in grad_out.iter().zip(&cache.xhat) {
                for (gv, hv) in g.channel(c).iter().zip(h.channel(c)) {
                    sum_g += gv.f64();
                    sum_gh += gv.f64() * hv.f64();
                }
            }
            dgamma[c] = T::of(sum_gh);
            dbeta[c] = T::of(sum_g);
            let scale = self.gamma.value[c].f64() * cache.inv_std[c] / count;
            for (gi, h) in input.iter_mut().zip(&cache.xhat) {
                for (gv, hv) in gi.channel_mut(c).iter_mut().zip(h.channel(c)) {
                    *gv = T::of(scale * (count * gv.f64() - sum_g - hv.f64() * sum_gh));
                }
            }
        }
        Ok(BnGrads { input, gamma: dgamma, beta: dbeta })
    }
}

pub fn relu<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_inplace<T: Real>(x: &mut Tensor4<T>) {
    for v in x.data_mut() {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
}

/// Gradient of ReLU given its output (positive output means the unit was active).
pub fn relu_backward<T: Real>(output: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>, NnError> {
    ensure_same_shape(output.shape(), grad_out.shape())?;
    let mut g = grad_out.clone();
    for (gv, &y) in g.data_mut().iter_mut().zip(output.data()) {
        if !(y > T::zero()) {
            *gv = T::zero();
        }
    }
    Ok(g)
}

#[inline]
pub fn sigmoid_scalar<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub fn sigmoid<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(sigmoid_scalar)
}

/// Gradient of the sigmoid given its output.
pub fn sigmoid_backward<T: Real>(output: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>, NnError> {
    ensure_same_shape(output.shape(), grad_out.shape())?;
    let mut g = grad_out.clone();
    for (gv, &p) in g.data_mut().iter_mut().zip(output.data()) {
        *gv *= p * (T::one() - p);
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn training_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<_> = (0..2)
            .map(|_| Tensor4::<f64>::from_fn([3, 4, 4, 4], |c, _, _, _| rng.gen_range(-2.0..5.0) * (c + 1) as f64))
            .collect();
        let mut bn = BatchNorm::new(3);
        let (ys, cache) = bn.forward(&xs, Mode::Train).unwrap();
        assert!(cache.is_some());
        for c in 0..3 {
            let vals: Vec<f64> = ys.iter().flat_map(|y| y.channel(c).to_vec()).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
        // running stats moved toward batch stats
        assert!(bn.running_mean.value.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn eval_uses_running_stats() {
        let mut bn = BatchNorm::<f64>::new(1);
        bn.running_mean.value[0] = 2.0;
        bn.running_var.value[0] = 4.0 - bn.eps;
        bn.gamma.value[0] = 3.0;
        bn.beta.value[0] = 1.0;
        let (y, cache) = bn.forward(&[Tensor4::full([1, 1, 1, 2], 6.0)], Mode::Eval).unwrap();
        assert!(cache.is_none());
        assert!((y[0].data()[0] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn relu_values() {
        let x = Tensor4::<f64>::from_vec([1, 1, 1, 3], vec![-1.0, 2.0, 0.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0, 0.0]);
    }

    #[test]
    fn sigmoid_range() {
        let x = Tensor4::<f64>::from_vec([1, 1, 1, 3], vec![-30.0, 0.0, 30.0]).unwrap();
        let y = sigmoid(&x);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(y.data()[1], 0.5);
    }
}
