//! Lateral semicircular canal (LSC) segmentation and geometric calibration
//! for temporal-bone CT volumes.
//!
//! The crate is organized bottom-up:
//!
//! - [`volume`]: voxel grids, label masks, cuboids and the `MVOL` file format.
//! - [`phantom`]: synthetic two-canal phantoms with a known rigid pose.
//! - [`nn3d`]: hand-written 3D network kernels and the multi-feature-fusion
//!   encoder-decoder (dense blocks, dilated convolution module, multi-pooling).
//! - [`losses`]: Dice and class-weighted cross-entropy losses, deep-supervision
//!   joint loss and the Dice metric.
//! - [`calibration`]: mask-driven mid-sagittal / LSC-plane frame estimation
//!   and isotropic resampling.
//! - [`pipeline`]: threshold segmentation, training loop and sliding-window
//!   inference used by the command line tool.

pub mod calibration;
pub mod geometry;
pub mod losses;
pub mod nn3d;
pub mod phantom;
pub mod pipeline;
pub mod volume;

mod error;

pub use error::{Error, Result};
