//! Dual-encoder recognition with rationale-conditioned prompts.
//!
//! A small reverse-mode autodiff engine drives a text/image dual encoder.
//! Images are scored against templated prompts, scores become joint tables
//! over (rationale set, category) pairs, and predictions are graded on
//! whether both the category and its rationale are right.

pub mod ablation;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod joint;
pub mod metrics;
pub mod prompt;
pub mod tensor;
pub mod train;
pub mod world;

pub use ablation::AblationKind;
pub use encoder::{DualEncoderParams, ImageTokens, ModelConfig, PromptMode};
pub use error::{Error, Result};
pub use joint::{ConditionalNormalization, Factorization, JointTable, LabelSpace, Scorer};
pub use metrics::{MetricsQuad, Prediction};
pub use prompt::{CategoryId, PromptKind, RationaleId, RenderedPrompt, Vocabulary};
pub use tensor::{Graph, Tensor, Var};
pub use train::{TrainConfig, TrainScope, TrainerState};
pub use world::{Example, World, WorldSpec};
