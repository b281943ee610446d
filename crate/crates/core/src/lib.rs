//! Relation extraction from distantly supervised bags of sentences.
//!
//! Sentences are encoded by a single Transformer block over word and
//! relative-position embeddings, pooled by masked max-pooling, and
//! aggregated per bag with relation-wise sentence attention. Training uses
//! plain mini-batch SGD on a small reverse-mode autodiff engine; evaluation
//! follows the held-out protocol (PR curve, P@N).

pub mod bag_model;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod graph;
pub mod model;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState};
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use model::{BagPrediction, Model, ModelConfig};
pub use params::{sgd_step, ParamGrad, ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;
pub use trainer::{TrainConfig, Trainer};
