//! Hierarchical vision-language representation learning with a stack of
//! dense co-attention layers shared by image-caption retrieval, visual
//! question answering and visual grounding decoders.

pub mod data;
pub mod decoders;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod task;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{Forward, Model, ModelConfig};
pub use task::{Split, TaskKind};
pub use tensor::{Mode, ParamId, ParamStore, Tape, Tensor, Var};
