//! Transposed 3D convolution (no padding), weights `[in, out, k, k, k]`.

use rand::Rng;

use super::conv::glorot_fill;
use super::real::{gemm, MatRef};
use super::tensor::{ensure_same_shape, Param, Tensor4};
use super::{NnError, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct TransposedConvParams<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransposedConvGrads<T> {
    pub input: Tensor4<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> TransposedConvParams<T> {
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        Self {
            weight: Param::zeros(&[in_ch, out_ch, kernel, kernel, kernel]),
            bias: Param::zeros(&[out_ch]),
            kernel,
            stride,
        }
    }

    /// 2³ kernel, stride 2: doubles every spatial axis.
    pub fn upsample2(in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(in_ch, out_ch, 2, 2);
        glorot_fill(&mut p.weight.value, in_ch * 8, out_ch * 8, rng);
        p
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn output_spatial(&self, input: [usize; 3]) -> [usize; 3] {
        input.map(|n| (n - 1) * self.stride + self.kernel)
    }

    fn check(&self, x: &Tensor4<T>) -> Result<[usize; 3], NnError> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(NnError::Shape("transposed conv needs positive kernel and stride".into()));
        }
        if x.channels() != self.in_channels() {
            return Err(NnError::Shape(format!(
                "transposed conv expects {} input channels, got {}",
                self.in_channels(),
                x.channels()
            )));
        }
        Ok(self.output_spatial(x.spatial()))
    }

    /// Linear output offset of kernel tap `t` relative to input voxel `(z, y, x)`.
    fn for_each_tap(&self, in_dims: [usize; 3], out_dims: [usize; 3], mut f: impl FnMut(usize, usize, usize)) {
        // f(tap, input_linear, output_linear)
        let k = self.kernel;
        let s = self.stride;
        let [d, h, w] = in_dims;
        let [_, oh, ow] = out_dims;
        for t in 0..k * k * k {
            let (a, b, c) = (t / (k * k), (t / k) % k, t % k);
            for z in 0..d {
                for y in 0..h {
                    let in_row = (z * h + y) * w;
                    let out_row = ((z * s + a) * oh + (y * s + b)) * ow + c;
                    for x in 0..w {
                        f(t, in_row + x, out_row + x * s);
                    }
                }
            }
        }
    }
}

/// `out[o, s*z + a, s*y + b, s*x + c] += w[i, o, a, b, c] * x[i, z, y, x]`, plus bias.
pub fn transposed_conv3d_forward<T: Real>(
    x: &Tensor4<T>,
    p: &TransposedConvParams<T>,
) -> Result<Tensor4<T>, NnError> {
    let od = p.check(x)?;
    let (ci, co) = (p.in_channels(), p.out_channels());
    let taps = p.kernel.pow(3);
    let n_in = x.spatial_len();
    let n_out: usize = od.iter().product();
    // rows (o, tap): contributions of every input voxel to every tap
    let mut contrib = vec![T::zero(); co * taps * n_in];
    gemm(
        co * taps, ci, n_in, T::one(),
        MatRef { data: &p.weight.value, rs: 1, cs: co * taps },
        MatRef { data: x.data(), rs: n_in, cs: 1 },
        T::zero(), &mut contrib, n_in, 1,
    );
    let mut out = vec![T::zero(); co * n_out];
    for (o, row) in out.chunks_mut(n_out).enumerate() {
        row.fill(p.bias.value[o]);
    }
    p.for_each_tap(x.spatial(), od, |t, i, j| {
        for o in 0..co {
            out[o * n_out + j] += contrib[(o * taps + t) * n_in + i];
        }
    });
    Tensor4::from_vec([co, od[0], od[1], od[2]], out)
}

pub fn transposed_conv3d_backward<T: Real>(
    x: &Tensor4<T>,
    p: &TransposedConvParams<T>,
    grad_out: &Tensor4<T>,
) -> Result<TransposedConvGrads<T>, NnError> {
    let od = p.check(x)?;
    let (ci, co) = (p.in_channels(), p.out_channels());
    ensure_same_shape(grad_out.shape(), [co, od[0], od[1], od[2]])?;
    let taps = p.kernel.pow(3);
    let n_in = x.spatial_len();
    let n_out: usize = od.iter().product();
    let g = grad_out.data();
    let bias = g.chunks(n_out).map(|r| r.iter().copied().sum()).collect();
    let mut gathered = vec![T::zero(); co * taps * n_in];
    p.for_each_tap(x.spatial(), od, |t, i, j| {
        for o in 0..co {
            gathered[(o * taps + t) * n_in + i] += g[o * n_out + j];
        }
    });
    let mut gx = vec![T::zero(); ci * n_in];
    gemm(
        ci, co * taps, n_in, T::one(),
        MatRef { data: &p.weight.value, rs: co * taps, cs: 1 },
        MatRef { data: &gathered, rs: n_in, cs: 1 },
        T::zero(), &mut gx, n_in, 1,
    );
    let mut gw = vec![T::zero(); ci * co * taps];
    gemm(
        co * taps, n_in, ci, T::one(),
        MatRef { data: &gathered, rs: n_in, cs: 1 },
        MatRef { data: x.data(), rs: 1, cs: n_in },
        T::zero(), &mut gw, 1, co * taps,
    );
    Ok(TransposedConvGrads { input: Tensor4::from_vec(x.shape(), gx)?, weight: gw, bias })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doubles_spatial_dims() {
        let p = TransposedConvParams::<f32>::zeros(2, 3, 2, 2);
        let y = transposed_conv3d_forward(&Tensor4::zeros([2, 3, 4, 5]), &p).unwrap();
        assert_eq!(y.shape(), [3, 6, 8, 10]);
        assert!(transposed_conv3d_forward(&Tensor4::zeros([1, 3, 4, 5]), &p).is_err());
    }

    #[test]
    fn single_voxel_stamps_kernel() {
        let mut p = TransposedConvParams::<f64>::zeros(1, 1, 2, 2);
        p.weight.value = (1..=8).map(|v| v as f64).collect();
        p.bias.value[0] = 0.5;
        let x = Tensor4::from_vec([1, 1, 1, 1], vec![2.0]).unwrap();
        let y = transposed_conv3d_forward(&x, &p).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    assert_eq!(y.at(0, a, b, c), 0.5 + 2.0 * (1 + a * 4 + b * 2 + c) as f64);
                }
            }
        }
    }
}
