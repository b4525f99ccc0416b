//! Forward-pass reference engine for vanilla, Dangle and R-Dangle decoding.
//!
//! Everything runs in `f32` on a single thread per decode. Weights are
//! read-only once loaded, so separate decodes can share them.

pub mod attention;
pub mod config;
pub mod engine;
pub mod schedule;
pub mod tensor;
pub mod weights;

pub use attention::{cross_attention, AttentionOutput, Mask};
pub use config::{Interval, ModelConfig, Variant, POSITION_ENCODING};
pub use engine::{
    greedy_decode, CrossEncodings, DecodeMode, DecodeOutcome, Engine, StepEncodings, StepTrace, TargetMemory,
};
pub use schedule::{build_schedule, ReEncodingSchedule};
pub use tensor::{argmax, LayerNorm, Linear, Matrix};
pub use weights::{AttentionParams, DecoderLayer, EncoderLayer, FeedForward, Weights};

#[derive(Debug, thiserror::Error)]
pub enum RdangleError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("token id {token} outside vocabulary of size {vocab}")]
    TokenOutOfVocab { token: u32, vocab: usize },
    #[error("sequence of {len} positions exceeds max_positions {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty input sequence")]
    EmptyInput,
    #[error("target memory holds {memory} positions, expected {expected}")]
    MemoryMismatch { memory: usize, expected: usize },
    #[error("non-finite logits at step {step}")]
    NonFinite { step: usize },
    #[error("weights file: {0}")]
    WeightsFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
