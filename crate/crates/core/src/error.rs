use thiserror::Error;

use crate::calibration::CalibrationError;
use crate::nn3d::{CheckpointError, NnError};
use crate::phantom::PhantomError;
use crate::volume::{MvolError, VolumeError};

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Top-level error for pipeline-level operations that cross module boundaries.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Mvol(#[from] MvolError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("empty segmentation: no voxel passed the {0}")]
    EmptySegmentation(String),
    #[error("training diverged at iteration {iteration}: loss is not finite")]
    Diverged { iteration: usize },
    #[error("{0}")]
    Invalid(String),
}
