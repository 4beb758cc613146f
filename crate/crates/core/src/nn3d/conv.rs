//! Dilated, strided 3D cross-correlation lowered to GEMM over z-slabs.

use rand::Rng;

use super::real::{gemm, MatRef};
use super::tensor::{ensure_same_shape, Param, Tensor4};
use super::{NnError, Real};

/// Upper bound on im2col buffer elements per slab.
const COL_BUDGET: usize = 1 << 21;

/// Weights `[out, in, k, k, k]`, bias `[out]` and the sampling geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: [usize; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub input: Tensor4<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub(crate) fn glorot_fill<T: Real>(values: &mut [T], fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
    let b = glorot_bound(fan_in, fan_out);
    for v in values {
        *v = T::of(rng.gen_range(-b..=b));
    }
}

impl<T: Real> ConvParams<T> {
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, dilation: usize, padding: usize) -> Self {
        Self {
            weight: Param::zeros(&[out_ch, in_ch, kernel, kernel, kernel]),
            bias: Param::zeros(&[out_ch]),
            kernel,
            stride,
            dilation,
            padding: [padding; 3],
        }
    }

    /// 3³ kernel with "same" padding for the given dilation.
    pub fn same3(in_ch: usize, out_ch: usize, dilation: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(in_ch, out_ch, 3, 1, dilation, dilation);
        p.init(rng);
        p
    }

    /// Pointwise 1³ kernel.
    pub fn pointwise(in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(in_ch, out_ch, 1, 1, 1, 0);
        p.init(rng);
        p
    }

    pub fn init(&mut self, rng: &mut impl Rng) {
        let k3 = self.kernel.pow(3);
        let (fan_in, fan_out) = (self.in_channels() * k3, self.out_channels() * k3);
        glorot_fill(&mut self.weight.value, fan_in, fan_out, rng);
        self.bias.value.iter_mut().for_each(|b| *b = T::zero());
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape[1]
    }

    fn validate(&self) -> Result<(), NnError> {
        if self.kernel == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(NnError::Shape("kernel, stride and dilation must be positive".into()));
        }
        if self.weight.shape.len() != 5 || self.weight.shape[2..] != [self.kernel; 3] {
            return Err(NnError::Shape(format!(
                "weight shape {:?} does not match kernel {}",
                self.weight.shape, self.kernel
            )));
        }
        if self.bias.len() != self.out_channels() {
            return Err(NnError::Shape("bias length differs from out channels".into()));
        }
        Ok(())
    }

    /// Output spatial size; the stride must divide the span exactly.
    pub fn output_spatial(&self, input: [usize; 3]) -> Result<[usize; 3], NnError> {
        self.validate()?;
        let reach = self.dilation * (self.kernel - 1) + 1;
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if padded < reach {
                return Err(NnError::Shape(format!(
                    "axis {a}: padded extent {padded} smaller than dilated kernel extent {reach}"
                )));
            }
            let span = padded - reach;
            if span % self.stride != 0 {
                return Err(NnError::NonIntegralOutput { axis: a, span, stride: self.stride });
            }
            out[a] = span / self.stride + 1;
        }
        Ok(out)
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<[usize; 3], NnError> {
        if x.channels() != self.in_channels() {
            return Err(NnError::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels(),
                x.channels()
            )));
        }
        self.output_spatial(x.spatial())
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == [0; 3]
    }
}

struct Lowering {
    in_dims: [usize; 3],
    out_dims: [usize; 3],
    kernel: usize,
    stride: usize,
    dilation: usize,
    padding: [usize; 3],
}

impl Lowering {
    fn new<T: Real>(p: &ConvParams<T>, in_dims: [usize; 3], out_dims: [usize; 3]) -> Self {
        Self { in_dims, out_dims, kernel: p.kernel, stride: p.stride, dilation: p.dilation, padding: p.padding }
    }

    fn plane(&self) -> usize {
        self.out_dims[1] * self.out_dims[2]
    }

    /// Valid output x range `[lo, hi)` for kernel tap `kx`.
    fn x_range(&self, kx: usize) -> (usize, usize) {
        let w = self.in_dims[2] as i64;
        let s = self.stride as i64;
        let shift = kx as i64 * self.dilation as i64 - self.padding[2] as i64;
        // ix = ox * s + shift must satisfy 0 <= ix < w
        let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
        let hi = if w - 1 - shift < 0 { 0 } else { (w - 1 - shift) / s + 1 };
        let hi = hi.min(self.out_dims[2] as i64);
        (lo.min(hi) as usize, hi.max(0) as usize)
    }

    /// Input coordinate along axis `a` for output `o` and tap `t`, if inside.
    #[inline]
    fn src(&self, a: usize, o: usize, t: usize) -> Option<usize> {
        let i = (o * self.stride + t * self.dilation) as i64 - self.padding[a] as i64;
        (i >= 0 && (i as usize) < self.in_dims[a]).then_some(i as usize)
    }

    /// Fill `col` (rows = in_ch * k³, cols = slab positions) for output planes `z0..z1`.
    fn im2col<T: Real>(&self, x: &[T], channels: usize, z0: usize, z1: usize, col: &mut [T]) {
        let k = self.kernel;
        let [_, ih, iw] = self.in_dims;
        let [_, oh, ow] = self.out_dims;
        let cols = (z1 - z0) * self.plane();
        let in_plane = ih * iw;
        let in_vol = self.in_dims[0] * in_plane;
        for c in 0..channels {
            let xc = &x[c * in_vol..(c + 1) * in_vol];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let row = ((c * k + kz) * k + ky) * k + kx;
                        let dst = &mut col[row * cols..(row + 1) * cols];
                        let (xlo, xhi) = self.x_range(kx);
                        let xshift = (kx * self.dilation) as i64 - self.padding[2] as i64;
                        for oz in z0..z1 {
                            let iz = self.src(0, oz, kz);
                            for oy in 0..oh {
                                let base = ((oz - z0) * oh + oy) * ow;
                                let line = &mut dst[base..base + ow];
                                let iy = self.src(1, oy, ky);
                                match (iz, iy) {
                                    (Some(iz), Some(iy)) if xlo < xhi => {
                                        line[..xlo].fill(T::zero());
                                        line[xhi..].fill(T::zero());
                                        let src = &xc[iz * in_plane + iy * iw..iz * in_plane + (iy + 1) * iw];
                                        if self.stride == 1 {
                                            let start = (xlo as i64 + xshift) as usize;
                                            line[xlo..xhi].copy_from_slice(&src[start..start + (xhi - xlo)]);
                                        } else {
                                            for ox in xlo..xhi {
                                                line[ox] = src[(ox as i64 * self.stride as i64 + xshift) as usize];
                                            }
                                        }
                                    }
                                    _ => line.fill(T::zero()),
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add `col` back onto the input gradient; adjoint of [`Lowering::im2col`].
    fn col2im<T: Real>(&self, col: &[T], channels: usize, z0: usize, z1: usize, gx: &mut [T]) {
        let k = self.kernel;
        let [_, ih, iw] = self.in_dims;
        let [_, oh, ow] = self.out_dims;
        let cols = (z1 - z0) * self.plane();
        let in_plane = ih * iw;
        let in_vol = self.in_dims[0] * in_plane;
        for c in 0..channels {
            let gc = &mut gx[c * in_vol..(c + 1) * in_vol];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let row = ((c * k + kz) * k + ky) * k + kx;
                        let src = &col[row * cols..(row + 1) * cols];
                        let (xlo, xhi) = self.x_range(kx);
                        if xlo >= xhi {
                            continue;
                        }
                        let xshift = (kx * self.dilation) as i64 - self.padding[2] as i64;
                        for oz in z0..z1 {
                            let Some(iz) = self.src(0, oz, kz) else { continue };
                            for oy in 0..oh {
                                let Some(iy) = self.src(1, oy, ky) else { continue };
                                let base = ((oz - z0) * oh + oy) * ow;
                                let line = &src[base..base + ow];
                                let dst = &mut gc[iz * in_plane + iy * iw..iz * in_plane + (iy + 1) * iw];
                                for ox in xlo..xhi {
                                    let ix = (ox as i64 * self.stride as i64 + xshift) as usize;
                                    dst[ix] += line[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn slab_planes(&self, rows: usize) -> usize {
        (COL_BUDGET / (rows * self.plane()).max(1)).clamp(1, self.out_dims[0])
    }
}

/// Cross-correlation with bias: output size per axis is
/// `(in + 2 pad - dilation (k - 1) - 1) / stride + 1`.
pub fn conv3d_forward<T: Real>(x: &Tensor4<T>, p: &ConvParams<T>) -> Result<Tensor4<T>, NnError> {
    let out_dims = p.check_input(x)?;
    let co = p.out_channels();
    let ci = p.in_channels();
    let n_out: usize = out_dims.iter().product();
    let mut out = vec![T::zero(); co * n_out];
    for (o, row) in out.chunks_mut(n_out).enumerate() {
        row.fill(p.bias.value[o]);
    }
    let kk = ci * p.kernel.pow(3);
    let w = MatRef { data: &p.weight.value, rs: kk, cs: 1 };
    if p.is_pointwise() {
        gemm(co, ci, n_out, T::one(), w, MatRef { data: x.data(), rs: n_out, cs: 1 }, T::one(), &mut out, n_out, 1);
    } else {
        let low = Lowering::new(p, x.spatial(), out_dims);
        let planes = low.slab_planes(kk);
        let mut col = vec![T::zero(); kk * planes * low.plane()];
        let mut z0 = 0;
        while z0 < out_dims[0] {
            let z1 = (z0 + planes).min(out_dims[0]);
            let cols = (z1 - z0) * low.plane();
            low.im2col(x.data(), ci, z0, z1, &mut col[..kk * cols]);
            let start = z0 * low.plane();
            gemm(
                co, kk, cols, T::one(), w,
                MatRef { data: &col[..kk * cols], rs: cols, cs: 1 },
                T::one(), &mut out[start..], n_out, 1,
            );
            z0 = z1;
        }
    }
    Tensor4::from_vec([co, out_dims[0], out_dims[1], out_dims[2]], out)
}

/// Exact gradients of [`conv3d_forward`] with respect to input, kernel and bias.
pub fn conv3d_backward<T: Real>(
    x: &Tensor4<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor4<T>,
) -> Result<ConvGrads<T>, NnError> {
    let out_dims = p.check_input(x)?;
    let co = p.out_channels();
    let ci = p.in_channels();
    ensure_same_shape(grad_out.shape(), [co, out_dims[0], out_dims[1], out_dims[2]])?;
    let n_out: usize = out_dims.iter().product();
    let g = grad_out.data();
    let bias: Vec<T> = g.chunks(n_out).map(|r| r.iter().copied().sum()).collect();
    let kk = ci * p.kernel.pow(3);
    let mut gw = vec![T::zero(); co * kk];
    let mut gx = vec![T::zero(); x.len()];
    let w_t = MatRef { data: &p.weight.value, rs: 1, cs: kk };
    if p.is_pointwise() {
        // dW = G X^T, dX = W^T G
        gemm(co, n_out, ci, T::one(), MatRef { data: g, rs: n_out, cs: 1 }, MatRef { data: x.data(), rs: 1, cs: n_out }, T::zero(), &mut gw, kk, 1);
        gemm(ci, co, n_out, T::one(), w_t, MatRef { data: g, rs: n_out, cs: 1 }, T::zero(), &mut gx, n_out, 1);
    } else {
        let low = Lowering::new(p, x.spatial(), out_dims);
        let planes = low.slab_planes(kk);
        let mut col = vec![T::zero(); kk * planes * low.plane()];
        let mut gcol = vec![T::zero(); kk * planes * low.plane()];
        let mut z0 = 0;
        while z0 < out_dims[0] {
            let z1 = (z0 + planes).min(out_dims[0]);
            let cols = (z1 - z0) * low.plane();
            let start = z0 * low.plane();
            let g_slab = MatRef { data: &g[start..], rs: n_out, cs: 1 };
            low.im2col(x.data(), ci, z0, z1, &mut col[..kk * cols]);
            gemm(co, cols, kk, T::one(), g_slab, MatRef { data: &col[..kk * cols], rs: 1, cs: cols }, T::one(), &mut gw, kk, 1);
            gemm(kk, co, cols, T::one(), w_t, g_slab, T::zero(), &mut gcol[..kk * cols], cols, 1);
            low.col2im(&gcol[..kk * cols], ci, z0, z1, &mut gx);
            z0 = z1;
        }
    }
    Ok(ConvGrads { input: Tensor4::from_vec(x.shape(), gx)?, weight: gw, bias })
}
