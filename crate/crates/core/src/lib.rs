//! Audio-driven co-speech gesture synthesis with a hierarchical decoder:
//! skeleton math, a reverse-mode autodiff engine, the networks and losses,
//! evaluation metrics and the corpus/checkpoint formats.

pub mod tensor;
pub mod pose;
pub mod data;
pub mod nn;
pub mod metrics;
pub mod model;
pub mod losses;
pub mod train;
pub mod eval;
pub mod config;
pub mod gradsuite;
pub mod pipeline;

pub use config::RunConfig;
pub use data::{ClipRecord, MelConfig};
pub use losses::LossWeights;
pub use model::{Discriminator, Generator, ModelConfig};
pub use pipeline::{Clip, EvalReport, Evaluator, PipelineError};
pub use pose::{PoseSequence, Skeleton};
pub use tensor::{Tape, Tensor, Var};
pub use train::{TrainConfig, Trainer};
