//! Hand-written 3D network kernels with analytic backward passes and the
//! multi-feature-fusion (MFF) encoder-decoder built from them.
//!
//! Tensors are `channels × depth × height × width`, width fastest. A batch is a
//! `Vec<Tensor4>`; convolutions run per sample and batch normalization pools
//! statistics across the batch. Everything is generic over [`Real`] so the same
//! code trains in `f32` and is gradient-checked in `f64`.

mod real;

pub mod adam;
pub mod blocks;
pub mod checkpoint;
pub mod conv;
pub mod network;
pub mod norm;
pub mod pool;
pub mod tensor;
pub mod transposed;

use thiserror::Error;

pub use adam::{Adam, AdamConfig};
pub use blocks::{Batch, ParamKind, ParamVisitor};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CheckpointError};
pub use conv::{conv3d_backward, conv3d_forward, ConvGrads, ConvParams};
pub use network::{MffNet, MffOutput, NetworkConfig, AUX_HEADS};
pub use norm::{relu, sigmoid, BatchNorm};
pub use pool::{pool3d_backward, pool3d_forward, PoolKind, PoolSpec, Pooled};
pub use real::Real;
pub use tensor::{Param, Tensor4};
pub use transposed::{transposed_conv3d_backward, transposed_conv3d_forward, TransposedConvGrads, TransposedConvParams};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("axis {axis}: span {span} is not divisible by stride {stride}")]
    NonIntegralOutput { axis: usize, span: usize, stride: usize },
    #[error("backward called before a training-mode forward pass")]
    BackwardBeforeForward,
    #[error("invalid network configuration: {0}")]
    Config(String),
}

/// Training mode uses batch statistics and records caches for backward;
/// inference mode uses running statistics and records nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Anything holding named parameters that an optimizer or checkpoint can walk.
pub trait Parameters<T: Real> {
    fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>);

    fn zero_grad(&mut self) {
        self.visit_params(&mut |_, p, _| p.zero_grad());
    }
}
