//! Scene-labeling model: convolutional encoder, multi-scale four-direction
//! GRU-ELC block, upsampling prediction head, and its training loop.

mod data;
mod metrics;
mod model;
mod optim;
mod params;
mod train;

pub use data::{LabeledGrid, IGNORE_LABEL};
pub use metrics::{evaluate, EvalReport};
pub use model::{ConvStage, ContextKind, HeadStage, SegModel, SegModelConfig};
pub use optim::{poly_lr, Adam};
pub use params::ParamStore;
pub use train::{
    dataset_loss, label_histogram, median_frequency_weights, train, train_with, weighted_cross_entropy, EpochMetrics, TrainConfig,
};
