use std::io;

use crate::attnmask::AttnError;
use crate::encoders::EncoderError;
use crate::masking::MaskError;
use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Attn(#[from] AttnError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("mask leaves the context empty")]
    EmptyContext,
    #[error("sequence position {0} is not a target token")]
    NotTarget(usize),
    #[error("caption needs at least two tokens")]
    EmptyCaption,
    #[error("no target tokens to predict")]
    NoTargets,
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint does not match config: {0}")]
    CheckpointMismatch(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
