//! Desk-scale neural stack for the ordering model.

pub mod checkpoint;
pub mod matrix;
pub mod model;
pub mod params;
pub mod tape;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use matrix::Matrix;
pub use model::{Hyperparams, LossBreakdown, OrderingModel, PreparedAlbum, TrainingMeta};
pub use params::{AdamConfig, GradientSet, ParamStore};
pub use train::{train, train_with_progress, EpochStats, TrainConfig, TrainOutcome};

/// Two-dimensional activations (rows × columns, row-major).
pub type ActivationTensor = Matrix;
