//! Learned power estimator: window features, a temporal convolutional
//! network with hand-written gradients, Adam training and inference.

pub mod checkpoint;
pub mod features;
pub mod model;
pub mod predict;
pub mod train;

pub use features::{build_dataset, DatasetConfig, NormStats, WindowedDataset};
pub use model::{ModelError, TcnConfig, TcnModel};
pub use predict::PowerEstimator;
pub use train::{train, TrainConfig, TrainError, TrainingHistory};
