//! Experiment engine for transfer learning on grayscale chest X-rays.
//!
//! The pipeline runs dataset scanning and balancing ([`dataset`]), image
//! preparation and augmentation ([`augment`]), backbone surgery for the three
//! transfer strategies ([`backbone`]), training ([`train`]) and evaluation
//! ([`metrics`]). Tensors and autograd come from candle on the CPU.

pub mod augment;
pub mod backbone;
pub mod dataset;
pub mod error;
pub mod imaging;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod seed;
pub mod train;

pub use augment::{
    build_training_set, prepare_eval_set, AugmentParams, PreparedSample, SourceSet, TrainingSet, TransformKind,
    TransformSpec,
};
pub use backbone::{
    apply_strategy, load_backbone, AdaptedModel, BackboneKind, FirstConvInit, LoadOptions, Strategy, StrategyConfig,
};
pub use dataset::{DatasetIndex, ImageRecord, Label, Manifest, NormStats, Split};
pub use error::{Error, Result};
pub use imaging::GrayImage;
pub use metrics::{ClassMetrics, ConfusionMatrix, Evaluation, MetricsRow};
pub use nn::{Mode, Network};
pub use optim::OptimizerKind;
pub use seed::SeedBank;
pub use train::{EpochRecord, RunHistory, TrainConfig};
