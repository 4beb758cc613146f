//! Adam optimizer with bias correction.

use std::collections::BTreeMap;

use super::{ParamKind, Parameters, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    /// Applies one update from the accumulated gradients of every trainable parameter.
    /// Gradients are left in place.
    pub fn step<T: Real>(&mut self, model: &mut impl Parameters<T>) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let moments = &mut self.moments;
        model.visit_params(&mut |name, p, kind| {
            if kind != ParamKind::Trainable {
                return;
            }
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            for ((w, g), (m, v)) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut().zip(v.iter_mut())) {
                let g = g.f64();
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let update = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                *w = T::of(w.f64() - update);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn3d::{Param, ParamVisitor};

    struct One(Param<f64>);

    impl Parameters<f64> for One {
        fn visit_params(&mut self, f: &mut ParamVisitor<'_, f64>) {
            f("w", &mut self.0, ParamKind::Trainable);
        }
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut m = One(Param::filled(&[3], 0.25));
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..3 {
            adam.step(&mut m);
        }
        assert_eq!(m.0.value, vec![0.25; 3]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut m = One(Param::zeros(&[2]));
        m.0.grad = vec![1.0, -1.0];
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut m);
        let expected = 1e-3 / (1.0 + 1e-8);
        assert!((m.0.value[0] + expected).abs() < 1e-15);
        assert!((m.0.value[1] - expected).abs() < 1e-15);
    }
}
