//! Secure aggregation of trunk updates: pairwise and common masks over a
//! fixed-point ring, random coordinate subsets and partner weighting.

mod keys;
mod protocol;
mod wire;

pub use keys::{provision, Channel, ChannelKeys, PartnerId, PartnerKeys, ServerKeyView};
pub use protocol::{
    aggregate, apply_weight, mask, scatter_update, select_subset, unmask, weight_factor, AggregateSum,
    MaskedVector, PublicTotals, WeightingScheme, AGGREGATOR_SENDER, CLIP,
};

use crate::primitives::CodecError;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SecAggError {
    #[error("subset size {k} out of range for dimension {dim}")]
    SubsetRange { k: usize, dim: usize },
    #[error("weighting denominator is zero")]
    ZeroDenominator,
    #[error("no pairwise seed for peer {peer}")]
    MissingPairwiseSeed { peer: PartnerId },
    #[error("missing partner: expected {expected} submissions, got {got}")]
    MissingPartner { expected: usize, got: usize },
    #[error("round mismatch: expected {expected}, got {got}")]
    RoundMismatch { expected: u64, got: u64 },
    #[error("submissions disagree on coordinates")]
    CoordsMismatch,
    #[error("submissions disagree on weighting scheme")]
    WeightMismatch,
    #[error("duplicate sender")]
    DuplicateSender,
    #[error("sender {sender} is not in the cohort")]
    UnknownSender { sender: PartnerId },
    #[error("coordinate {coord} out of range for dimension {dim}")]
    CoordOutOfRange { coord: u64, dim: usize },
    #[error("malformed wire message: {0}")]
    Wire(&'static str),
    #[error(transparent)]
    Codec(#[from] CodecError),
}
