//! Sparse-input multi-task network: shared trunk, private head and an
//! optional catalogue head.

pub mod checkpoint;
pub mod nn;
pub mod params;

use thiserror::Error;

pub use checkpoint::{
    catalogue_from_bytes, head_from_bytes, load_catalogue, load_head, load_trunk, trunk_from_bytes,
    TrunkCheckpoint,
};
pub use nn::{backward, forward, loss, ForwardPass, GradientUpdate, LossValue};
pub use params::{Architecture, Dense, ModelParams, Nonlinearity};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("bad shape: {0}")]
    Shape(String),
    #[error("label kind does not match task kind in column {col}")]
    KindMismatch { col: usize },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
