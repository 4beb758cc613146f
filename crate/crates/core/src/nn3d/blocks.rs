//! Trainable layers and the composite encoder modules.
//!
//! Every layer exposes `forward(inputs, mode) -> (outputs, cache)` over a batch
//! and `backward(cache, grad_outputs) -> grad_inputs`, accumulating parameter
//! gradients into its [`Param`]s. Caches exist only in training mode.

use rand::Rng;

use super::conv::{conv3d_backward, conv3d_forward, ConvParams};
use super::norm::{relu_backward, relu_inplace, BatchNorm, BnCache};
use super::pool::{pool3d_backward, pool3d_forward, PoolKind, PoolSpec};
use super::tensor::{Param, Tensor4};
use super::transposed::{transposed_conv3d_backward, transposed_conv3d_forward, TransposedConvParams};
use super::{Mode, NnError, Real};

pub type Batch<T> = Vec<Tensor4<T>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Running statistics, stored in checkpoints only.
    Buffer,
}

/// Callback used to enumerate parameters in a fixed order.
pub type ParamVisitor<'a, T> = dyn FnMut(&str, &mut Param<T>, ParamKind) + 'a;

fn missing_cache() -> NnError {
    NnError::BackwardBeforeForward
}

/// Splits every sample of `batch` into channel groups; returns one batch per group.
fn split_batch<T: Real>(batch: &[Tensor4<T>], sizes: &[usize]) -> Result<Vec<Batch<T>>, NnError> {
    let mut groups: Vec<Batch<T>> = vec![Vec::with_capacity(batch.len()); sizes.len()];
    for t in batch {
        for (g, part) in groups.iter_mut().zip(t.split_channels(sizes)?) {
            g.push(part);
        }
    }
    Ok(groups)
}

pub(crate) fn concat_batches<T: Real>(parts: &[&Batch<T>]) -> Result<Batch<T>, NnError> {
    let n = parts[0].len();
    (0..n)
        .map(|i| {
            let items: Vec<&Tensor4<T>> = parts.iter().map(|b| &b[i]).collect();
            Tensor4::concat_channels(&items)
        })
        .collect()
}

pub(crate) fn add_batches<T: Real>(a: &mut Batch<T>, b: &Batch<T>) -> Result<(), NnError> {
    for (x, y) in a.iter_mut().zip(b) {
        x.add_assign(y)?;
    }
    Ok(())
}

/// Convolution without normalization (output heads).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub params: ConvParams<T>,
}

#[derive(Debug)]
pub struct ConvCache<T> {
    input: Batch<T>,
}

impl<T: Real> Conv<T> {
    pub fn forward(&self, xs: Batch<T>, mode: Mode) -> Result<(Batch<T>, Option<ConvCache<T>>), NnError> {
        let out = xs.iter().map(|x| conv3d_forward(x, &self.params)).collect::<Result<_, _>>()?;
        Ok((out, (mode == Mode::Train).then_some(ConvCache { input: xs })))
    }

    pub fn backward(&mut self, cache: Option<ConvCache<T>>, grads: Batch<T>) -> Result<Batch<T>, NnError> {
        let cache = cache.ok_or_else(missing_cache)?;
        let mut gin = Vec::with_capacity(grads.len());
        for (x, g) in cache.input.iter().zip(&grads) {
            let r = conv3d_backward(x, &self.params, g)?;
            self.params.weight.accumulate(&r.weight);
            self.params.bias.accumulate(&r.bias);
            gin.push(r.input);
        }
        Ok(gin)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&format!("{prefix}.weight"), &mut self.params.weight, ParamKind::Trainable);
        f(&format!("{prefix}.bias"), &mut self.params.bias, ParamKind::Trainable);
    }
}

/// Transposed convolution layer (decoder up-sampling).
#[derive(Debug, Clone, PartialEq)]
pub struct UpConv<T> {
    pub params: TransposedConvParams<T>,
}

impl<T: Real> UpConv<T> {
    pub fn new(in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        Self { params: TransposedConvParams::upsample2(in_ch, out_ch, rng) }
    }

    pub fn forward(&self, xs: Batch<T>, mode: Mode) -> Result<(Batch<T>, Option<ConvCache<T>>), NnError> {
        let out = xs.iter().map(|x| transposed_conv3d_forward(x, &self.params)).collect::<Result<_, _>>()?;
        Ok((out, (mode == Mode::Train).then_some(ConvCache { input: xs })))
    }

    pub fn backward(&mut self, cache: Option<ConvCache<T>>, grads: Batch<T>) -> Result<Batch<T>, NnError> {
        let cache = cache.ok_or_else(missing_cache)?;
        let mut gin = Vec::with_capacity(grads.len());
        for (x, g) in cache.input.iter().zip(&grads) {
            let r = transposed_conv3d_backward(x, &self.params, g)?;
            self.params.weight.accumulate(&r.weight);
            self.params.bias.accumulate(&r.bias);
            gin.push(r.input);
        }
        Ok(gin)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&format!("{prefix}.weight"), &mut self.params.weight, ParamKind::Trainable);
        f(&format!("{prefix}.bias"), &mut self.params.bias, ParamKind::Trainable);
    }
}

/// Convolution followed by batch normalization and ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBnRelu<T> {
    pub conv: ConvParams<T>,
    pub bn: BatchNorm<T>,
}

#[derive(Debug)]
pub struct ConvBnReluCache<T> {
    input: Batch<T>,
    bn: BnCache<T>,
    output: Batch<T>,
}

impl<T: Real> ConvBnRelu<T> {
    pub fn new(conv: ConvParams<T>) -> Self {
        let bn = BatchNorm::new(conv.out_channels());
        Self { conv, bn }
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }

    pub fn forward(&mut self, xs: Batch<T>, mode: Mode) -> Result<(Batch<T>, Option<ConvBnReluCache<T>>), NnError> {
        let pre: Batch<T> = xs.iter().map(|x| conv3d_forward(x, &self.conv)).collect::<Result<_, _>>()?;
        let (mut out, bn) = self.bn.forward(&pre, mode)?;
        drop(pre);
        out.iter_mut().for_each(relu_inplace);
        let cache = match bn {
            Some(bn) => Some(ConvBnReluCache { input: xs, bn, output: out.clone() }),
            None => None,
        };
        Ok((out, cache))
    }

    pub fn backward(&mut self, cache: Option<ConvBnReluCache<T>>, grads: Batch<T>) -> Result<Batch<T>, NnError> {
        let cache = cache.ok_or_else(missing_cache)?;
        let g_pre: Batch<T> = cache
            .output
            .iter()
            .zip(&grads)
            .map(|(y, g)| relu_backward(y, g))
            .collect::<Result<_, _>>()?;
        let bn = self.bn.backward(&cache.bn, &g_pre)?;
        self.bn.gamma.accumulate(&bn.gamma);
        self.bn.beta.accumulate(&bn.beta);
        let mut gin = Vec::with_capacity(grads.len());
        for (x, g) in cache.input.iter().zip(&bn.input) {
            let r = conv3d_backward(x, &self.conv, g)?;
            self.conv.weight.accumulate(&r.weight);
            self.conv.bias.accumulate(&r.bias);
            gin.push(r.input);
        }
        Ok(gin)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&format!("{prefix}.conv.weight"), &mut self.conv.weight, ParamKind::Trainable);
        f(&format!("{prefix}.conv.bias"), &mut self.conv.bias, ParamKind::Trainable);
        f(&format!("{prefix}.bn.gamma"), &mut self.bn.gamma, ParamKind::Trainable);
        f(&format!("{prefix}.bn.beta"), &mut self.bn.beta, ParamKind::Trainable);
        f(&format!("{prefix}.bn.running_mean"), &mut self.bn.running_mean, ParamKind::Buffer);
        f(&format!("{prefix}.bn.running_var"), &mut self.bn.running_var, ParamKind::Buffer);
    }
}

/// Densely connected block: each layer sees the concatenation of the block
/// input and all earlier layer outputs; a pointwise convolution reduces the
/// final concatenation to `out_ch` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseBlock<T> {
    pub layers: Vec<ConvBnRelu<T>>,
    pub reduce: ConvBnRelu<T>,
}

#[derive(Debug)]
pub struct DenseBlockCache<T> {
    layers: Vec<ConvBnReluCache<T>>,
    reduce: ConvBnReluCache<T>,
}

impl<T: Real> DenseBlock<T> {
    pub fn new(in_ch: usize, growth: usize, n_layers: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        let layers = (0..n_layers)
            .map(|i| ConvBnRelu::new(ConvParams::same3(in_ch + i * growth, growth, 1, rng)))
            .collect();
        let reduce = ConvBnRelu::new(ConvParams::pointwise(Self::concat_channels(in_ch, growth, n_layers), out_ch, rng));
        Self { layers, reduce }
    }

    /// Channel count entering the reduction: `in + layers * growth`.
    pub fn concat_channels(in_ch: usize, growth: usize, n_layers: usize) -> usize {
        in_ch + n_layers * growth
    }

    pub fn forward(&mut self, xs: Batch<T>, mode: Mode) -> Result<(Batch<T>, Option<DenseBlockCache<T>>), NnError> {
        let mut feats = xs;
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            let (y, c) = layer.forward(feats.clone(), mode)?;
            feats = concat_batches(&[&feats, &y])?;
            caches.extend(c);
        }
        let (out, rc) = self.reduce.forward(feats, mode)?;
        let cache = match rc {
            Some(reduce) => Some(DenseBlockCache { layers: caches, reduce }),
            None => None,
        };
        Ok((out, cache))
    }

    pub fn backward(&mut self, cache: Option<DenseBlockCache<T>>, grads: Batch<T>) -> Result<Batch<T>, NnError> {
        let cache = cache.ok_or_else(missing_cache)?;
        let mut g_feats = self.reduce.backward(Some(cache.reduce), grads)?;
        for (layer, c) in self.layers.iter_mut().zip(cache.layers).rev() {
            let growth = layer.out_channels();
            let prev = g_feats[0].channels() - growth;
            let mut parts = split_batch(&g_feats, &[prev, growth])?;
            let g_y = parts.pop().unwrap();
            let mut g_prev = parts.pop().unwrap();
            let g_in = layer.backward(Some(c), g_y)?;
            add_batches(&mut g_prev, &g_in)?;
            g_feats = g_prev;
        }
        Ok(g_feats)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit(&format!("{prefix}.layer{i}"), f);
        }
        self.reduce.visit(&format!("{prefix}.reduce"), f);
    }
}

/// Dilation rates of the three parallel branches.
pub const DILATIONS: [usize; 3] = [1, 2, 3];

/// Three parallel 3³ convolutions (dilation 1, 2, 3 with matching padding so
/// the spatial size is kept), concatenated and reduced by a pointwise convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct DilatedConvModule<T> {
    pub branches: [ConvBnRelu<T>; 3],
    pub reduce: ConvBnRelu<T>,
}

#[derive(Debug)]
pub struct DilatedConvCache<T> {
    branches: Vec<ConvBnReluCache<T>>,
    reduce: ConvBnReluCache<T>,
}

impl<T: Real> DilatedConvModule<T> {
    pub fn new(in_ch: usize, branch_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        let branches = DILATIONS.map(|d| ConvBnRelu::new(ConvParams::same3(in_ch, branch_ch, d, rng)));
        let reduce = ConvBnRelu::new(ConvParams::pointwise(3 * branch_ch, out_ch, rng));
        Self { branches, reduce }
    }

    pub fn forward(&mut self, xs: Batch<T>, mode: Mode) -> Result<(Batch<T>, Option<DilatedConvCache<T>>), NnError> {
        let mut outs = Vec::with_capacity(3);
        let mut caches = Vec::with_capacity(3);
        for b in &mut self.branches {
            let (y, c) = b.forward(xs.clone(), mode)?;
            outs.push(y);
            caches.extend(c);
        }
        let cat = concat_batches(&[&outs[0], &outs[1], &outs[2]])?;
        drop(outs);
        let (out, rc) = self.reduce.forward(cat, mode)?;
        let cache = match rc {
            Some(reduce) => Some(DilatedConvCache { branches: caches, reduce }),
            None => None,
        };
        Ok((out, cache))
    }

    pub fn backward(&mut self, cache: Option<DilatedConvCache<T>>, grads: Batch<T>) -> Result<Batch<T>, NnError> {
        let cache = cache.ok_or_else(missing_cache)?;
        let g_cat = self.reduce.backward(Some(cache.reduce), grads)?;
        let sizes = self.branches.each_ref().map(|b| b.out_channels());
        let parts = split_batch(&g_cat, &sizes)?;
        let mut total: Option<Batch<T>> = None;
        for ((b, c), g) in self.branches.iter_mut().zip(cache.branches).zip(parts) {
            let gi = b.backward(Some(c), g)?;
            match total.as_mut() {
                Some(t) => add_batches(t, &gi)?,
                None => total = Some(gi),
            }
        }
        Ok(total.unwrap())
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        for (b, d) in self.branches.iter_mut().zip(DILATIONS) {
            b.visit(&format!("{prefix}.dil{d}"), f);
        }
        self.reduce.visit(&format!("{prefix}.reduce"), f);
    }
}

/// 2³ max, 2³ average (non-overlapping) and 3³ max, 3³ average (overlapping,
/// padding 1) pooling, all stride 2, so every branch halves even spatial dims.
pub const POOL_BRANCHES: [PoolSpec; 4] = [
    PoolSpec::new(PoolKind::Max, 2, 2, 0),
    PoolSpec::new(PoolKind::Avg, 2, 2, 0),
    PoolSpec::new(PoolKind::Max, 3, 2, 1),
    PoolSpec::new(PoolKind::Avg, 3, 2, 1),
];

/// Four parallel pooling branches concatenated on channels, then reduced back
/// to the input channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiPoolModule<T> {
    pub reduce: ConvBnRelu<T>,
}

#[derive(Debug)]
pub struct MultiPoolCache<T> {
    input_shape: [usize; 4],
    argmax: Vec<[Vec<u32>; 4]>,
    reduce: ConvBnReluCache<T>,
}

impl<T: Real> MultiPoolModule<T> {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        Self { reduce: ConvBnRelu::new(ConvParams::pointwise(4 * channels, channels, rng)) }
    }

    /// Pool one sample through all four branches; returns branch outputs and argmaxes.
    pub fn branches(x: &Tensor4<T>) -> Result<([Tensor4<T>; 4], [Vec<u32>; 4]), NnError> {
        if x.spatial().iter().any(|&n| n % 2 != 0) {
            return Err(NnError::Shape(format!("multi-pool needs even spatial dims, got {:?}", x.spatial())));
        }
        let mut outs = Vec::with_capacity(4);
        let mut args = Vec::with_capacity(4);
        for spec in POOL_BRANCHES {
            let p = pool3d_forward(x, spec)?;
            outs.push(p.output);
            args.push(p.argmax);
        }
        Ok((outs.try_into().unwrap(), args.try_into().unwrap()))
    }

    pub fn forward(&mut self, xs: Batch<T>, mode: Mode) -> Result<(Batch<T>, Option<MultiPoolCache<T>>), NnError> {
        let mut cat = Vec::with_capacity(xs.len());
        let mut argmax = Vec::with_capacity(xs.len());
        for x in &xs {
            let (outs, args) = Self::branches(x)?;
            cat.push(Tensor4::concat_channels(&[&outs[0], &outs[1], &outs[2], &outs[3]])?);
            argmax.push(args);
        }
        let input_shape = xs[0].shape();
        let (out, rc) = self.reduce.forward(cat, mode)?;
        let cache = match rc {
            Some(reduce) => Some(MultiPoolCache { input_shape, argmax, reduce }),
            None => None,
        };
        Ok((out, cache))
    }

    pub fn backward(&mut self, cache: Option<MultiPoolCache<T>>, grads: Batch<T>) -> Result<Batch<T>, NnError> {
        let cache = cache.ok_or_else(missing_cache)?;
        let g_cat = self.reduce.backward(Some(cache.reduce), grads)?;
        let c = cache.input_shape[0];
        let mut gin = Vec::with_capacity(g_cat.len());
        for (g, args) in g_cat.iter().zip(&cache.argmax) {
            let parts = g.split_channels(&[c; 4])?;
            let mut total = Tensor4::zeros(cache.input_shape);
            for ((spec, part), arg) in POOL_BRANCHES.iter().zip(&parts).zip(args) {
                total.add_assign(&pool3d_backward(cache.input_shape, *spec, arg, part)?)?;
            }
            gin.push(total);
        }
        Ok(gin)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.reduce.visit(&format!("{prefix}.reduce"), f);
    }
}
