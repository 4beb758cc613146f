//! Max and average pooling with symmetric padding.
//!
//! Padded positions never win a max and are excluded from the average
//! divisor, so a constant input pools to the same constant everywhere.

use super::tensor::{ensure_same_shape, Tensor4};
use super::{NnError, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub kind: PoolKind,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolSpec {
    pub const fn new(kind: PoolKind, kernel: usize, stride: usize, padding: usize) -> Self {
        Self { kind, kernel, stride, padding }
    }

    pub fn output_spatial(&self, input: [usize; 3]) -> Result<[usize; 3], NnError> {
        if self.kernel == 0 || self.stride == 0 || self.padding >= self.kernel {
            return Err(NnError::Shape(format!("invalid pooling geometry {self:?}")));
        }
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding;
            if padded < self.kernel {
                return Err(NnError::Shape(format!("axis {a}: input {} too small for {self:?}", input[a])));
            }
            out[a] = (padded - self.kernel) / self.stride + 1;
        }
        Ok(out)
    }

    /// Clipped input window `[lo, hi)` along one axis for output coordinate `o`.
    #[inline]
    fn window(&self, o: usize, n: usize) -> (usize, usize) {
        let start = (o * self.stride) as i64 - self.padding as i64;
        let lo = start.max(0) as usize;
        let hi = ((start + self.kernel as i64).max(0) as usize).min(n);
        (lo, hi)
    }
}

/// Pooling result; `argmax` holds the winning input index per output for max pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct Pooled<T> {
    pub output: Tensor4<T>,
    pub argmax: Vec<u32>,
}

pub fn pool3d_forward<T: Real>(x: &Tensor4<T>, spec: PoolSpec) -> Result<Pooled<T>, NnError> {
    let [c, d, h, w] = x.shape();
    let od = spec.output_spatial([d, h, w])?;
    let mut out = Vec::with_capacity(c * od.iter().product::<usize>());
    let mut argmax = Vec::new();
    for ch in 0..c {
        for oz in 0..od[0] {
            let (z0, z1) = spec.window(oz, d);
            for oy in 0..od[1] {
                let (y0, y1) = spec.window(oy, h);
                for ox in 0..od[2] {
                    let (x0, x1) = spec.window(ox, w);
                    match spec.kind {
                        PoolKind::Max => {
                            let mut best = T::neg_infinity();
                            let mut best_i = 0;
                            for z in z0..z1 {
                                for y in y0..y1 {
                                    for xx in x0..x1 {
                                        let i = x.index(ch, z, y, xx);
                                        let v = x.data()[i];
                                        if v > best {
                                            best = v;
                                            best_i = i;
                                        }
                                    }
                                }
                            }
                            out.push(best);
                            argmax.push(best_i as u32);
                        }
                        PoolKind::Avg => {
                            let mut acc = T::zero();
                            for z in z0..z1 {
                                for y in y0..y1 {
                                    let row = x.index(ch, z, y, 0);
                                    for v in &x.data()[row + x0..row + x1] {
                                        acc += *v;
                                    }
                                }
                            }
                            let count = (z1 - z0) * (y1 - y0) * (x1 - x0);
                            out.push(acc / T::of(count as f64));
                        }
                    }
                }
            }
        }
    }
    Ok(Pooled { output: Tensor4::from_vec([c, od[0], od[1], od[2]], out)?, argmax })
}

pub fn pool3d_backward<T: Real>(
    input_shape: [usize; 4],
    spec: PoolSpec,
    argmax: &[u32],
    grad_out: &Tensor4<T>,
) -> Result<Tensor4<T>, NnError> {
    let [c, d, h, w] = input_shape;
    let od = spec.output_spatial([d, h, w])?;
    ensure_same_shape(grad_out.shape(), [c, od[0], od[1], od[2]])?;
    let mut gx = Tensor4::zeros(input_shape);
    let g = grad_out.data();
    match spec.kind {
        PoolKind::Max => {
            if argmax.len() != g.len() {
                return Err(NnError::Shape("argmax does not match pooled output".into()));
            }
            let buf = gx.data_mut();
            for (&i, &v) in argmax.iter().zip(g) {
                buf[i as usize] += v;
            }
        }
        PoolKind::Avg => {
            let mut o = 0;
            for ch in 0..c {
                for oz in 0..od[0] {
                    let (z0, z1) = spec.window(oz, d);
                    for oy in 0..od[1] {
                        let (y0, y1) = spec.window(oy, h);
                        for ox in 0..od[2] {
                            let (x0, x1) = spec.window(ox, w);
                            let count = (z1 - z0) * (y1 - y0) * (x1 - x0);
                            let share = g[o] / T::of(count as f64);
                            o += 1;
                            for z in z0..z1 {
                                for y in y0..y1 {
                                    let row = ((ch * d + z) * h + y) * w;
                                    for v in &mut gx.data_mut()[row + x0..row + x1] {
                                        *v += share;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BRANCHES: [PoolSpec; 4] = [
        PoolSpec::new(PoolKind::Max, 2, 2, 0),
        PoolSpec::new(PoolKind::Avg, 2, 2, 0),
        PoolSpec::new(PoolKind::Max, 3, 2, 1),
        PoolSpec::new(PoolKind::Avg, 3, 2, 1),
    ];

    #[test]
    fn constant_input_is_preserved() {
        let x = Tensor4::<f64>::full([2, 6, 4, 8], 3.25);
        for spec in BRANCHES {
            let p = pool3d_forward(&x, spec).unwrap();
            assert_eq!(p.output.shape(), [2, 3, 2, 4]);
            assert!(p.output.data().iter().all(|&v| v == 3.25), "{spec:?}");
        }
    }

    #[test]
    fn halving_ladder() {
        for spec in BRANCHES {
            assert_eq!(spec.output_spatial([48, 48, 48]).unwrap(), [24, 24, 24]);
            assert_eq!(spec.output_spatial([24, 24, 24]).unwrap(), [12, 12, 12]);
        }
    }

    #[test]
    fn max_backward_routes_to_winner() {
        let x = Tensor4::<f64>::from_fn([1, 2, 2, 2], |_, z, y, x| (z * 4 + y * 2 + x) as f64);
        let spec = BRANCHES[0];
        let p = pool3d_forward(&x, spec).unwrap();
        assert_eq!(p.output.data(), &[7.0]);
        let g = pool3d_backward(x.shape(), spec, &p.argmax, &Tensor4::full([1, 1, 1, 1], 2.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0]);
    }
}
