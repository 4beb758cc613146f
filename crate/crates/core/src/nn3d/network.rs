//! The MFF encoder-decoder.
//!
//! ```text
//! input 1×S³ ─ stem ─ DB1 ─┬─ MP ─ DB2 ─┬─ MP ─ DCM ─┬─ up ─ cat ─ dec1 ─┬─ up ─ cat ─ dec2 ─ head ─ σ   main
//!                          │            └────────────│────────┘          │     │
//!                          └─────────────────────────│───────────────────│─────┘
//!                                                    └ aux1 ─ up ─ up ─ σ │
//!                                                           aux2 ─ up ─ σ ┘
//! ```
//!
//! `S` must be divisible by 4. Every convolution except the heads is followed
//! by batch normalization and ReLU; transposed convolutions are linear.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::blocks::{
    add_batches, concat_batches, Batch, Conv, ConvBnRelu, ConvBnReluCache, ConvCache, DenseBlock, DenseBlockCache,
    DilatedConvCache, DilatedConvModule, MultiPoolCache, MultiPoolModule, ParamVisitor, UpConv,
};
use super::conv::ConvParams;
use super::norm::{sigmoid, sigmoid_backward};
use super::tensor::Tensor4;
use super::{Mode, NnError, Parameters, Real};

/// Number of deep-supervision heads.
pub const AUX_HEADS: usize = 2;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub in_channels: usize,
    /// Stem output channels.
    pub c0: usize,
    pub growth: usize,
    pub dense_layers: usize,
    /// Channels after the first dense block (full resolution).
    pub c1: usize,
    /// Channels after the second dense block (half resolution).
    pub c2: usize,
    /// Dilated-module output channels (quarter resolution).
    pub c3: usize,
    /// Loss weights of the aux heads: quarter-resolution head, then half-resolution head.
    pub lambda: [f64; AUX_HEADS],
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            c0: 8,
            growth: 8,
            dense_layers: 4,
            c1: 16,
            c2: 32,
            c3: 64,
            lambda: [0.5, 0.25],
            bn_eps: super::norm::BN_EPS,
            bn_momentum: super::norm::BN_MOMENTUM,
        }
    }
}

impl NetworkConfig {
    /// A tiny network with the same topology, for gradient checks on 8³ inputs.
    pub fn reduced() -> Self {
        Self { c0: 2, growth: 2, dense_layers: 2, c1: 2, c2: 3, c3: 2, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let channels = [self.in_channels, self.c0, self.growth, self.dense_layers, self.c1, self.c2, self.c3];
        if channels.contains(&0) {
            return Err(NnError::Config(format!("channel counts must be positive: {channels:?}")));
        }
        if self.lambda.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(NnError::Config(format!("lambda values must lie in [0, 1]: {:?}", self.lambda)));
        }
        if !(self.bn_eps > 0.0) || !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(NnError::Config("bn_eps must be positive and bn_momentum in [0, 1)".into()));
        }
        Ok(())
    }

    /// Integer fields in checkpoint order.
    pub fn channel_plan(&self) -> [usize; 7] {
        [self.in_channels, self.c0, self.growth, self.dense_layers, self.c1, self.c2, self.c3]
    }

    pub fn from_channel_plan(plan: [usize; 7], lambda: [f64; AUX_HEADS]) -> Self {
        let [in_channels, c0, growth, dense_layers, c1, c2, c3] = plan;
        Self { in_channels, c0, growth, dense_layers, c1, c2, c3, lambda, ..Self::default() }
    }
}

/// Network outputs: foreground probabilities at input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct MffOutput<T> {
    pub main: Batch<T>,
    /// One batch per aux head, in `lambda` order.
    pub aux: Vec<Batch<T>>,
}

#[derive(Debug)]
struct Tape<T> {
    stem: ConvBnReluCache<T>,
    db1: DenseBlockCache<T>,
    mp1: MultiPoolCache<T>,
    db2: DenseBlockCache<T>,
    mp2: MultiPoolCache<T>,
    dcm: DilatedConvCache<T>,
    up1: ConvCache<T>,
    dec1: ConvBnReluCache<T>,
    up2: ConvCache<T>,
    dec2: ConvBnReluCache<T>,
    head: ConvCache<T>,
    aux1: ConvCache<T>,
    aux1_up: Vec<ConvCache<T>>,
    aux2: ConvCache<T>,
    aux2_up: ConvCache<T>,
    output: MffOutput<T>,
}

#[derive(Debug)]
pub struct MffNet<T> {
    pub config: NetworkConfig,
    pub stem: ConvBnRelu<T>,
    pub db1: DenseBlock<T>,
    pub mp1: MultiPoolModule<T>,
    pub db2: DenseBlock<T>,
    pub mp2: MultiPoolModule<T>,
    pub dcm: DilatedConvModule<T>,
    pub up1: UpConv<T>,
    pub dec1: ConvBnRelu<T>,
    pub up2: UpConv<T>,
    pub dec2: ConvBnRelu<T>,
    pub head: Conv<T>,
    pub aux1: Conv<T>,
    pub aux1_up: [UpConv<T>; 2],
    pub aux2: Conv<T>,
    pub aux2_up: UpConv<T>,
    tape: Option<Box<Tape<T>>>,
}

impl<T: Real> MffNet<T> {
    /// Glorot-initialized network; biases and BN shifts start at zero.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self, NnError> {
        config.validate()?;
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let mut net = Self {
            stem: ConvBnRelu::new(ConvParams::same3(c.in_channels, c.c0, 1, rng)),
            db1: DenseBlock::new(c.c0, c.growth, c.dense_layers, c.c1, rng),
            mp1: MultiPoolModule::new(c.c1, rng),
            db2: DenseBlock::new(c.c1, c.growth, c.dense_layers, c.c2, rng),
            mp2: MultiPoolModule::new(c.c2, rng),
            dcm: DilatedConvModule::new(c.c2, c.c2, c.c3, rng),
            up1: UpConv::new(c.c3, c.c2, rng),
            dec1: ConvBnRelu::new(ConvParams::same3(2 * c.c2, c.c2, 1, rng)),
            up2: UpConv::new(c.c2, c.c1, rng),
            dec2: ConvBnRelu::new(ConvParams::same3(2 * c.c1, c.c1, 1, rng)),
            head: Conv { params: ConvParams::pointwise(c.c1, 1, rng) },
            aux1: Conv { params: ConvParams::pointwise(c.c3, 1, rng) },
            aux1_up: [UpConv::new(1, 1, rng), UpConv::new(1, 1, rng)],
            aux2: Conv { params: ConvParams::pointwise(c.c2, 1, rng) },
            aux2_up: UpConv::new(1, 1, rng),
            config,
            tape: None,
        };
        let (eps, momentum) = (net.config.bn_eps, net.config.bn_momentum);
        net.for_each_bn(|bn| {
            bn.eps = eps;
            bn.momentum = momentum;
        });
        Ok(net)
    }

    fn for_each_bn(&mut self, mut f: impl FnMut(&mut super::norm::BatchNorm<T>)) {
        let mut layers: Vec<&mut ConvBnRelu<T>> = vec![&mut self.stem, &mut self.dec1, &mut self.dec2];
        for db in [&mut self.db1, &mut self.db2] {
            layers.extend(db.layers.iter_mut());
            layers.push(&mut db.reduce);
        }
        layers.push(&mut self.mp1.reduce);
        layers.push(&mut self.mp2.reduce);
        layers.extend(self.dcm.branches.iter_mut());
        layers.push(&mut self.dcm.reduce);
        for l in layers {
            f(&mut l.bn);
        }
    }

    fn check_input(&self, xs: &[Tensor4<T>]) -> Result<(), NnError> {
        let first = xs.first().ok_or_else(|| NnError::Shape("empty batch".into()))?;
        let [c, d, h, w] = first.shape();
        if c != self.config.in_channels {
            return Err(NnError::Shape(format!("network expects {} input channels, got {c}", self.config.in_channels)));
        }
        if [d, h, w].iter().any(|&n| n == 0 || n % 4 != 0) {
            return Err(NnError::Shape(format!("spatial dims must be positive multiples of 4, got {:?}", [d, h, w])));
        }
        if xs.iter().any(|x| x.shape() != first.shape()) {
            return Err(NnError::Shape("batch samples differ in shape".into()));
        }
        Ok(())
    }

    /// Runs the network. In training mode the pass is recorded for [`MffNet::backward`]
    /// and BN running statistics are updated; inference mode clears any recorded pass.
    pub fn forward(&mut self, xs: Batch<T>, mode: Mode) -> Result<MffOutput<T>, NnError> {
        self.check_input(&xs)?;
        self.tape = None;
        let (s, stem) = self.stem.forward(xs, mode)?;
        let (f1, db1) = self.db1.forward(s, mode)?;
        let (p1, mp1) = self.mp1.forward(f1.clone(), mode)?;
        let (f2, db2) = self.db2.forward(p1, mode)?;
        let (p2, mp2) = self.mp2.forward(f2.clone(), mode)?;
        let (f3, dcm) = self.dcm.forward(p2, mode)?;

        let (a1, aux1) = self.aux1.forward(f3.clone(), mode)?;
        let (a1, aux1_up0) = self.aux1_up[0].forward(a1, mode)?;
        let (a1, aux1_up1) = self.aux1_up[1].forward(a1, mode)?;

        let (u1, up1) = self.up1.forward(f3, mode)?;
        let (d1, dec1) = self.dec1.forward(concat_batches(&[&u1, &f2])?, mode)?;
        drop((u1, f2));

        let (a2, aux2) = self.aux2.forward(d1.clone(), mode)?;
        let (a2, aux2_up) = self.aux2_up.forward(a2, mode)?;

        let (u2, up2) = self.up2.forward(d1, mode)?;
        let (d2, dec2) = self.dec2.forward(concat_batches(&[&u2, &f1])?, mode)?;
        drop((u2, f1));
        let (logits, head) = self.head.forward(d2, mode)?;

        let output = MffOutput {
            main: logits.iter().map(sigmoid).collect(),
            aux: vec![a1.iter().map(sigmoid).collect(), a2.iter().map(sigmoid).collect()],
        };
        if mode == Mode::Train {
            let missing = NnError::BackwardBeforeForward;
            self.tape = Some(Box::new(Tape {
                stem: stem.ok_or(missing.clone())?,
                db1: db1.ok_or(missing.clone())?,
                mp1: mp1.ok_or(missing.clone())?,
                db2: db2.ok_or(missing.clone())?,
                mp2: mp2.ok_or(missing.clone())?,
                dcm: dcm.ok_or(missing.clone())?,
                up1: up1.ok_or(missing.clone())?,
                dec1: dec1.ok_or(missing.clone())?,
                up2: up2.ok_or(missing.clone())?,
                dec2: dec2.ok_or(missing.clone())?,
                head: head.ok_or(missing.clone())?,
                aux1: aux1.ok_or(missing.clone())?,
                aux1_up: vec![aux1_up0.ok_or(missing.clone())?, aux1_up1.ok_or(missing.clone())?],
                aux2: aux2.ok_or(missing.clone())?,
                aux2_up: aux2_up.ok_or(missing)?,
                output: output.clone(),
            }));
        }
        Ok(output)
    }

    /// Whether a training-mode pass is recorded.
    pub fn has_tape(&self) -> bool {
        self.tape.is_some()
    }

    /// Back-propagates loss gradients with respect to the output probabilities,
    /// accumulating parameter gradients. Consumes the recorded pass and returns
    /// the gradient with respect to the input batch.
    pub fn backward(&mut self, grad_main: Batch<T>, grad_aux: Vec<Batch<T>>) -> Result<Batch<T>, NnError> {
        let tape = *self.tape.take().ok_or(NnError::BackwardBeforeForward)?;
        if grad_aux.len() != AUX_HEADS {
            return Err(NnError::Shape(format!("expected {AUX_HEADS} aux gradients, got {}", grad_aux.len())));
        }
        let logit_grad = |p: &Batch<T>, g: &Batch<T>| -> Result<Batch<T>, NnError> {
            if p.len() != g.len() {
                return Err(NnError::Shape("gradient batch size differs from forward pass".into()));
            }
            p.iter().zip(g).map(|(p, g)| sigmoid_backward(p, g)).collect()
        };
        let mut grad_aux = grad_aux.into_iter();
        let g_a1 = logit_grad(&tape.output.aux[0], &grad_aux.next().unwrap())?;
        let g_a2 = logit_grad(&tape.output.aux[1], &grad_aux.next().unwrap())?;
        let g_logits = logit_grad(&tape.output.main, &grad_main)?;

        let mut aux1_up = tape.aux1_up.into_iter();
        let (c0, c1) = (aux1_up.next(), aux1_up.next());
        let g = self.aux1_up[1].backward(c1, g_a1)?;
        let g = self.aux1_up[0].backward(c0, g)?;
        let g_f3_aux = self.aux1.backward(Some(tape.aux1), g)?;

        let g_d2 = self.head.backward(Some(tape.head), g_logits)?;
        let g_cat2 = self.dec2.backward(Some(tape.dec2), g_d2)?;
        let [g_u2, g_f1_skip] = split_pair(&g_cat2, self.config.c1)?;
        let mut g_d1 = self.up2.backward(Some(tape.up2), g_u2)?;

        let g = self.aux2_up.backward(Some(tape.aux2_up), g_a2)?;
        add_batches(&mut g_d1, &self.aux2.backward(Some(tape.aux2), g)?)?;

        let g_cat1 = self.dec1.backward(Some(tape.dec1), g_d1)?;
        let [g_u1, g_f2_skip] = split_pair(&g_cat1, self.config.c2)?;
        let mut g_f3 = self.up1.backward(Some(tape.up1), g_u1)?;
        add_batches(&mut g_f3, &g_f3_aux)?;

        let g_p2 = self.dcm.backward(Some(tape.dcm), g_f3)?;
        let mut g_f2 = self.mp2.backward(Some(tape.mp2), g_p2)?;
        add_batches(&mut g_f2, &g_f2_skip)?;
        let g_p1 = self.db2.backward(Some(tape.db2), g_f2)?;
        let mut g_f1 = self.mp1.backward(Some(tape.mp1), g_p1)?;
        add_batches(&mut g_f1, &g_f1_skip)?;
        let g_s = self.db1.backward(Some(tape.db1), g_f1)?;
        self.stem.backward(Some(tape.stem), g_s)
    }

    /// Converts every parameter to another scalar type; the recorded pass is dropped.
    pub fn cast<U: Real>(&mut self) -> MffNet<U> {
        let mut values = Vec::new();
        self.visit_params(&mut |_, p, _| values.push(p.value.iter().map(|v| U::of(v.f64())).collect::<Vec<U>>()));
        let mut out = MffNet::<U>::new(self.config.clone(), 0).expect("config was validated at construction");
        let mut values = values.into_iter();
        out.visit_params(&mut |_, p, _| p.value = values.next().unwrap());
        out
    }

    /// Total number of trainable scalars.
    pub fn parameter_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p, kind| {
            if kind == super::ParamKind::Trainable {
                n += p.len();
            }
        });
        n
    }
}

impl<T: Real> Clone for MffNet<T> {
    /// Copies configuration and parameters; a recorded pass is not copied.
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            stem: self.stem.clone(),
            db1: self.db1.clone(),
            mp1: self.mp1.clone(),
            db2: self.db2.clone(),
            mp2: self.mp2.clone(),
            dcm: self.dcm.clone(),
            up1: self.up1.clone(),
            dec1: self.dec1.clone(),
            up2: self.up2.clone(),
            dec2: self.dec2.clone(),
            head: self.head.clone(),
            aux1: self.aux1.clone(),
            aux1_up: self.aux1_up.clone(),
            aux2: self.aux2.clone(),
            aux2_up: self.aux2_up.clone(),
            tape: None,
        }
    }
}

fn split_pair<T: Real>(batch: &Batch<T>, first: usize) -> Result<[Batch<T>; 2], NnError> {
    let mut a = Vec::with_capacity(batch.len());
    let mut b = Vec::with_capacity(batch.len());
    for t in batch {
        let mut parts = t.split_channels(&[first, t.channels() - first])?;
        b.push(parts.pop().unwrap());
        a.push(parts.pop().unwrap());
    }
    Ok([a, b])
}

impl<T: Real> Parameters<T> for MffNet<T> {
    fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        self.stem.visit("stem", f);
        self.db1.visit("db1", f);
        self.mp1.visit("mp1", f);
        self.db2.visit("db2", f);
        self.mp2.visit("mp2", f);
        self.dcm.visit("dcm", f);
        self.up1.visit("up1", f);
        self.dec1.visit("dec1", f);
        self.up2.visit("up2", f);
        self.dec2.visit("dec2", f);
        self.head.visit("head", f);
        self.aux1.visit("aux1", f);
        self.aux1_up[0].visit("aux1.up0", f);
        self.aux1_up[1].visit("aux1.up1", f);
        self.aux2.visit("aux2", f);
        self.aux2_up.visit("aux2.up0", f);
    }
}

impl<T: Real> PartialEq for MffNet<T> {
    /// Compares configuration and parameter values; recorded passes are ignored.
    fn eq(&self, other: &Self) -> bool {
        let (mut a, mut b) = (self.clone(), other.clone());
        let mut va = Vec::new();
        a.visit_params(&mut |n, p, _| va.push((n.to_string(), p.value.clone())));
        let mut vb = Vec::new();
        b.visit_params(&mut |n, p, _| vb.push((n.to_string(), p.value.clone())));
        self.config == other.config && va == vb
    }
}
