//! Encoder, slot attention, temporal predictor and spatial-broadcast decoder.
//!
//! The same stack serves as teacher and student; only the encoder widths differ.
//! Tape-level functions take a [`Bound`] (weights placed on a tape) so that the
//! trainer can differentiate through them, while [`forward_video`] runs inference
//! on plain tensors.

mod config;
pub mod cost;
mod forward;
mod weights;

pub use config::ModelConfig;
pub use cost::{flop_count, param_count};
pub use forward::{
    decode, decode_slots, encode, encode_frozen, forward_video, forward_video_vars, masks_from_alphas,
    patchify, predict_next, project, slot_attention, slot_noise, Decoded, FrameOutput, FrameVars, SlotKind,
    SlotSet,
};
pub use weights::{
    tensor_specs, Bound, ModelWeights, ParamCount, TensorSpec, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, ENCODER_SEED,
};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("slot attention received all-zero features")]
    DegenerateFeatures,
    #[error("slot {index} collapsed to norm {norm:e}")]
    DegenerateSlot { index: usize, norm: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
