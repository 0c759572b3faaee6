//! Core library: tensors with reverse-mode autodiff, transformer encoder
//! layers, the two video classification architectures, a synthetic
//! fine-grained benchmark, and the training/evaluation machinery.

pub mod arch;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod streams;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use arch::{
    cross_attention_diagnostic, spatial_avg_pool, BackboneStub, CrossEncoderModel, FeatureVolume,
    MeanPoolBaseline, Model, ModelConfig, VisionEncoderModel, Vocabulary,
};
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use gradcheck::{run_full_suite, GradCheckReport, GradCheckResult};
pub use eval::{evaluate, multi_clip_logits, predict_examples};
pub use graph::{Graph, Var};
pub use metrics::{eval_report, EvalReport};
pub use params::{ParamId, ParamStore};
pub use synthdata::{generate, load_dataset, save_dataset, Dataset, Example, Payload, SyntheticSpec};
pub use tensor::Tensor;
pub use training::{
    clip_gradients, lr_schedule, train, EpochStats, OptimizerKind, OptimizerState, ScheduleKind,
    TrainConfig, TrainOptions, TrainOutput,
};
