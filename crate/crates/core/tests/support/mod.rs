//! Independent reference implementations shared by the integration tests:
//! nested-loop convolution and pooling, zero-inflated dilation kernels and
//! central finite differences.

#![allow(dead_code)]

use lsccal::nn3d::{ConvParams, Param, PoolKind, PoolSpec, Tensor4, TransposedConvParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn random_tensor(rng: &mut impl Rng, shape: [usize; 4]) -> Tensor4<f64> {
    Tensor4::from_vec(shape, random_vec(rng, shape.iter().product(), -1.0, 1.0)).unwrap()
}

pub fn random_conv(
    rng: &mut impl Rng,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    padding: usize,
) -> ConvParams<f64> {
    let mut p = ConvParams::zeros(in_ch, out_ch, kernel, stride, dilation, padding);
    p.weight.value = random_vec(rng, p.weight.value.len(), -1.0, 1.0);
    p.bias.value = random_vec(rng, out_ch, -1.0, 1.0);
    p
}

/// Direct cross-correlation over every output voxel, channel and tap.
pub fn naive_conv(x: &Tensor4<f64>, p: &ConvParams<f64>) -> Tensor4<f64> {
    let [ci, d, h, w] = x.shape();
    let co = p.bias.value.len();
    let k = p.kernel;
    let out_len = |n: usize, a: usize| (n + 2 * p.padding[a] - p.dilation * (k - 1) - 1) / p.stride + 1;
    let od = [out_len(d, 0), out_len(h, 1), out_len(w, 2)];
    let input = |c: usize, z: i64, y: i64, xx: i64| -> f64 {
        if z < 0 || y < 0 || xx < 0 || z >= d as i64 || y >= h as i64 || xx >= w as i64 {
            0.0
        } else {
            x.at(c, z as usize, y as usize, xx as usize)
        }
    };
    Tensor4::from_fn([co, od[0], od[1], od[2]], |o, oz, oy, ox| {
        let mut acc = p.bias.value[o];
        for i in 0..ci {
            for a in 0..k {
                for b in 0..k {
                    for c in 0..k {
                        let z = (oz * p.stride + a * p.dilation) as i64 - p.padding[0] as i64;
                        let y = (oy * p.stride + b * p.dilation) as i64 - p.padding[1] as i64;
                        let xx = (ox * p.stride + c * p.dilation) as i64 - p.padding[2] as i64;
                        let wi = (((o * ci + i) * k + a) * k + b) * k + c;
                        acc += p.weight.value[wi] * input(i, z, y, xx);
                    }
                }
            }
        }
        acc
    })
}

/// Dense kernel of size `d (k - 1) + 1` holding the dilated taps and zeros elsewhere.
pub fn zero_inflate(p: &ConvParams<f64>) -> ConvParams<f64> {
    let (k, d) = (p.kernel, p.dilation);
    let kd = d * (k - 1) + 1;
    let (co, ci) = (p.bias.value.len(), p.weight.value.len() / (p.bias.value.len() * k * k * k));
    let mut dense = ConvParams::zeros(ci, co, kd, p.stride, 1, 0);
    dense.padding = p.padding;
    dense.bias = p.bias.clone();
    let mut w = vec![0.0; co * ci * kd * kd * kd];
    for o in 0..co {
        for i in 0..ci {
            for a in 0..k {
                for b in 0..k {
                    for c in 0..k {
                        let src = (((o * ci + i) * k + a) * k + b) * k + c;
                        let dst = (((o * ci + i) * kd + a * d) * kd + b * d) * kd + c * d;
                        w[dst] = p.weight.value[src];
                    }
                }
            }
        }
    }
    dense.weight = Param { shape: vec![co, ci, kd, kd, kd], value: w, grad: vec![0.0; co * ci * kd * kd * kd] };
    dense
}

/// Scatter form of the transposed convolution.
pub fn naive_transposed(x: &Tensor4<f64>, p: &TransposedConvParams<f64>) -> Tensor4<f64> {
    let [ci, d, h, w] = x.shape();
    let co = p.bias.value.len();
    let (k, s) = (p.kernel, p.stride);
    let od = [(d - 1) * s + k, (h - 1) * s + k, (w - 1) * s + k];
    let mut out = Tensor4::from_fn([co, od[0], od[1], od[2]], |o, _, _, _| p.bias.value[o]);
    for i in 0..ci {
        for z in 0..d {
            for y in 0..h {
                for xx in 0..w {
                    let v = x.at(i, z, y, xx);
                    for o in 0..co {
                        for a in 0..k {
                            for b in 0..k {
                                for c in 0..k {
                                    let wi = (((i * co + o) * k + a) * k + b) * k + c;
                                    let at = out.index(o, z * s + a, y * s + b, xx * s + c);
                                    out.data_mut()[at] += p.weight.value[wi] * v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Pooling by enumerating each window; padded positions are skipped.
pub fn naive_pool(x: &Tensor4<f64>, spec: PoolSpec) -> Tensor4<f64> {
    let [c, d, h, w] = x.shape();
    let (k, s, pad) = (spec.kernel as i64, spec.stride as i64, spec.padding as i64);
    let out_len = |n: usize| ((n as i64 + 2 * pad - k) / s + 1) as usize;
    Tensor4::from_fn([c, out_len(d), out_len(h), out_len(w)], |ch, oz, oy, ox| {
        let mut vals = Vec::new();
        for a in 0..k {
            for b in 0..k {
                for e in 0..k {
                    let z = oz as i64 * s + a - pad;
                    let y = oy as i64 * s + b - pad;
                    let xx = ox as i64 * s + e - pad;
                    if z >= 0 && y >= 0 && xx >= 0 && z < d as i64 && y < h as i64 && xx < w as i64 {
                        vals.push(x.at(ch, z as usize, y as usize, xx as usize));
                    }
                }
            }
        }
        match spec.kind {
            PoolKind::Max => vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            PoolKind::Avg => vals.iter().sum::<f64>() / vals.len() as f64,
        }
    })
}

pub const FD_STEP: f64 = 1e-6;

/// Central difference `(f(x + h e_i) - f(x - h e_i)) / 2h` for each listed index.
pub fn central_diff(x: &mut [f64], indices: &[usize], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    indices
        .iter()
        .map(|&i| {
            let v = x[i];
            x[i] = v + FD_STEP;
            let up = f(x);
            x[i] = v - FD_STEP;
            let down = f(x);
            x[i] = v;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over paired entries.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor)).fold(0.0, f64::max)
}

/// `Σ r_i y_i`, the scalar probe whose gradient with respect to `y` is `r`.
pub fn probe(y: &[f64], r: &[f64]) -> f64 {
    y.iter().zip(r).map(|(a, b)| a * b).sum()
}

/// Up to `n` distinct indices below `len`, always including the ends.
pub fn sample_indices(rng: &mut impl Rng, len: usize, n: usize) -> Vec<usize> {
    if len <= n {
        return (0..len).collect();
    }
    let mut idx: Vec<usize> = rand::seq::index::sample(rng, len, n).into_vec();
    idx[0] = 0;
    idx[1] = len - 1;
    idx.sort_unstable();
    idx.dedup();
    idx
}
