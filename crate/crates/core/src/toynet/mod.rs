//! Minimal query-based detector trained with ray denoising.

pub mod encoding;
pub mod hungarian;
pub mod io;
pub mod loss;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod train;

pub use hungarian::{hungarian_match, MatchResult};
pub use loss::LossConfig;
pub use model::{DecoderConfig, HeadOutput, Model, PredictedBox, RayQueries, SceneInputs};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub use train::{gradient_check, train, train_step, AdamW, StepStats, TrainConfig};
