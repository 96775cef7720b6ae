//! Streaming video-to-text adapter with memory compression.

pub mod autodiff;
pub mod bank;
pub mod config;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod scorer;
pub mod spatial;
pub mod tensor;
pub mod train;
pub mod topk;

pub use bank::{CompressionPlan, MemoryBank, Strategy};
pub use config::{AdapterConfig, DataConfig, Optimizer, RunConfig, TrainConfig};
pub use error::{ReefError, Result};
pub use flops::{FlopsDelta, FlopsReport};
pub use io::{Checkpoint, MetricsRow};
pub use model::{ModelParams, PipelineMode};
pub use scorer::ScorerParams;
pub use tensor::{GradCheckReport, Matrix, SeededRng};
pub use topk::{PerturbConfig, SelectMode, SelectionMatrix};
pub use train::{Corpus, EvalReport, Stage, ToyStream, ToyStreamSpec};
