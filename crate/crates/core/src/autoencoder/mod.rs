//! Triplane autoencoder: a 3D-conv encoder that pools a one-hot scene into
//! three axis-aligned feature planes, and an implicit point decoder.

mod model;
mod train;

pub use model::{
    one_hot, positional_embedding, triplane_taps, voxel_centers, AeArch, LatentStats, Triplane, TriplaneAutoencoder,
};
pub use train::{
    ae_loss, sample_points, scene_loss, train_autoencoder, write_loss_csv, AeTrainConfig, EpochLog, TrainedAutoencoder,
};

use thiserror::Error;

use crate::config::ConfigError;
use crate::numerics::NumericsError;
use crate::voxel::VoxelError;

#[derive(Debug, Error)]
pub enum AeError {
    #[error("grid dims {dims:?} not divisible by (d, d, d_z) = ({d}, {d}, {d_z})")]
    IndivisibleDims { dims: [usize; 3], d: usize, d_z: usize },
    #[error("query coordinate {coord:?} outside grid {dims:?}")]
    OutOfBounds { coord: [f64; 3], dims: [usize; 3] },
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: usize, step: usize, detail: String },
    #[error("training set is empty")]
    EmptyDataset,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Voxel(#[from] VoxelError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
