//! Flow-guided video field-of-view expansion: mask synthesis, flow
//! completion, feature propagation, a mixed focal transformer with a
//! recurrent clip hub, training, inference and evaluation.

pub mod clip_recurrent_hub;
pub mod error;
pub mod explicit_propagation;
pub mod flow_completion;
pub mod inference_engine;
pub mod layers;
pub mod metrics_bench;
pub mod mix_focal_transformer;
pub mod model_assembly;
pub mod token_embedding;
pub mod training_objective;
pub mod video_masks;

pub use error::{Error, Result};

pub type Generator32 = model_assembly::Generator<f32>;
pub type Generator64 = model_assembly::Generator<f64>;
pub type Video32 = video_masks::VideoSequence<f32>;
pub type Video64 = video_masks::VideoSequence<f64>;
pub type ClipCache32 = clip_recurrent_hub::ClipCache<f32>;
pub type ClipCache64 = clip_recurrent_hub::ClipCache<f64>;
pub type Trainer32 = training_objective::Trainer<f32>;
pub type Trainer64 = training_objective::Trainer<f64>;
