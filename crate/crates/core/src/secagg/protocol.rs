//! Masking, aggregation and unmasking of partner updates.
//!
//! A partner `i` sends, for each coordinate `t` of the round subset,
//!
//! ```text
//! enc(u[c_t]) + Σ_{j≠i} sign(i,j)·PRG(s_ij, round, t) + PRG(s_common, round‖i, t)   (mod 2^ring_bits)
//! ```
//!
//! with `sign(i,j) = +1` for `i < j` and `−1` otherwise. Pairwise terms cancel
//! in the aggregator's sum; the common terms do not, so only holders of the
//! common seed can read the aggregate.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::keys::{Channel, ChannelKeys, PartnerId};
use super::SecAggError;
use crate::model::GradientUpdate;
use crate::primitives::{derive_stream, FixedPointCodec, RingElem, Seed, SeededStream, StreamId};

/// Updates are clipped to `±CLIP` before encoding so that sums over up to
/// 16 partners stay far inside the codec range.
pub const CLIP: f64 = 100.0;

/// Sender id used for aggregates emitted by the aggregator.
pub const AGGREGATOR_SENDER: u32 = u32::MAX;

/// Partner weighting scheme applied before masking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WeightingScheme {
    /// Scale by the partner's share of the round's samples.
    #[serde(rename = "data_proportional")]
    DataProportional,
    /// Scale by `1/P`.
    #[serde(rename = "uniform")]
    Uniform,
    /// Scale by the partner's share of the round's observed labels.
    #[serde(rename = "nnz_proportional")]
    NnzProportional,
}

impl WeightingScheme {
    pub fn tag(self) -> u8 {
        match self {
            WeightingScheme::DataProportional => 0,
            WeightingScheme::Uniform => 1,
            WeightingScheme::NnzProportional => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(WeightingScheme::DataProportional),
            1 => Some(WeightingScheme::Uniform),
            2 => Some(WeightingScheme::NnzProportional),
            _ => None,
        }
    }
}

impl std::str::FromStr for WeightingScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "data_proportional" | "data" => Ok(WeightingScheme::DataProportional),
            "uniform" => Ok(WeightingScheme::Uniform),
            "nnz_proportional" | "nnz" => Ok(WeightingScheme::NnzProportional),
            other => Err(format!("unknown weighting scheme {other:?}")),
        }
    }
}

/// Cleartext round totals every partner needs for weighting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicTotals {
    pub n_partners: u64,
    pub total_samples: u64,
    pub total_nnz: u64,
}

/// Scale factor for one partner's mean gradient.
pub fn weight_factor(
    n_samples: usize,
    nnz: usize,
    scheme: WeightingScheme,
    totals: &PublicTotals,
) -> Result<f64, SecAggError> {
    let (num, den) = match scheme {
        WeightingScheme::DataProportional => (n_samples as f64, totals.total_samples),
        WeightingScheme::Uniform => (1.0, totals.n_partners),
        WeightingScheme::NnzProportional => (nnz as f64, totals.total_nnz),
    };
    if den == 0 {
        return Err(SecAggError::ZeroDenominator);
    }
    Ok(num / den as f64)
}

/// Weighted trunk vector of one partner.
pub fn apply_weight(
    g: &GradientUpdate,
    scheme: WeightingScheme,
    totals: &PublicTotals,
) -> Result<Vec<f64>, SecAggError> {
    let f = weight_factor(g.n_samples, g.nnz, scheme, totals)?;
    Ok(g.trunk_grad.iter().map(|v| v * f).collect())
}

/// The `k` coordinates every seed holder sends this round, sorted.
pub fn select_subset(subset_seed: &Seed, round: u32, dim: usize, k: usize) -> Result<Vec<u64>, SecAggError> {
    if k == 0 || k > dim {
        return Err(SecAggError::SubsetRange { k, dim });
    }
    if k == dim {
        return Ok((0..dim as u64).collect());
    }
    let mut s = derive_stream(subset_seed, StreamId::new(crate::primitives::Purpose::Subset, round, 0, 0));
    let mut idx: Vec<u64> = rand::seq::index::sample(&mut s, dim, k)
        .into_iter()
        .map(|i| i as u64)
        .collect();
    idx.sort_unstable();
    Ok(idx)
}

/// A masked update restricted to the round subset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedVector {
    pub round: u64,
    pub sender: u32,
    pub coords: Vec<u64>,
    pub values: Vec<RingElem>,
    pub weight_tag: u8,
}

/// Sum of all masked vectors of a round, still carrying the common masks.
pub type AggregateSum = MaskedVector;

fn pair_stream(keys: &ChannelKeys, me: PartnerId, peer: PartnerId, round: u32) -> Result<SeededStream, SecAggError> {
    let seed = keys
        .pairwise
        .get(&peer)
        .ok_or(SecAggError::MissingPairwiseSeed { peer })?;
    Ok(derive_stream(
        seed,
        StreamId::pair(keys.channel.pair_purpose(), round, me as u16, peer as u16),
    ))
}

fn common_stream(common_seed: &Seed, channel: Channel, round: u32, party: PartnerId) -> SeededStream {
    derive_stream(common_seed, StreamId::common(channel.common_purpose(), round, party as u16))
}

/// Masks a weighted update at `coords`.
pub fn mask(
    update: &[f64],
    keys: &ChannelKeys,
    me: PartnerId,
    round: u32,
    coords: &[u64],
    codec: &FixedPointCodec,
    scheme: WeightingScheme,
) -> Result<MaskedVector, SecAggError> {
    if !keys.cohort.contains(&me) {
        return Err(SecAggError::UnknownSender { sender: me });
    }
    let mut values = Vec::with_capacity(coords.len());
    for &c in coords {
        let v = *update.get(c as usize).ok_or(SecAggError::CoordOutOfRange {
            coord: c,
            dim: update.len(),
        })?;
        values.push(codec.encode(v.clamp(-CLIP, CLIP))?);
    }
    for &peer in keys.cohort.iter().filter(|&&j| j != me) {
        let mut s = pair_stream(keys, me, peer, round)?;
        let add = me < peer;
        for v in values.iter_mut() {
            let m = codec.reduce(s.next_u64());
            *v = if add { codec.add(*v, m) } else { codec.sub(*v, m) };
        }
    }
    let mut s = common_stream(&keys.common_seed, keys.channel, round, me);
    for v in values.iter_mut() {
        *v = codec.add(*v, codec.reduce(s.next_u64()));
    }
    Ok(MaskedVector {
        round: round as u64,
        sender: me,
        coords: coords.to_vec(),
        values,
        weight_tag: scheme.tag(),
    })
}

/// Coordinate-wise modular sum of exactly `cohort.len()` submissions.
///
/// Fewer submissions abort the round with [`SecAggError::MissingPartner`]:
/// without every pairwise partner the masks cannot cancel.
pub fn aggregate(
    masked: &[MaskedVector],
    cohort: &[PartnerId],
    codec: &FixedPointCodec,
) -> Result<AggregateSum, SecAggError> {
    let mut senders: Vec<u32> = masked.iter().map(|m| m.sender).collect();
    senders.sort_unstable();
    if senders.windows(2).any(|w| w[0] == w[1]) {
        return Err(SecAggError::DuplicateSender);
    }
    if let Some(&s) = senders.iter().find(|s| !cohort.contains(s)) {
        return Err(SecAggError::UnknownSender { sender: s });
    }
    if masked.len() < cohort.len() {
        return Err(SecAggError::MissingPartner {
            expected: cohort.len(),
            got: masked.len(),
        });
    }
    let first = &masked[0];
    for m in &masked[1..] {
        if m.round != first.round {
            return Err(SecAggError::RoundMismatch {
                expected: first.round,
                got: m.round,
            });
        }
        if m.coords != first.coords || m.values.len() != first.values.len() {
            return Err(SecAggError::CoordsMismatch);
        }
        if m.weight_tag != first.weight_tag {
            return Err(SecAggError::WeightMismatch);
        }
    }
    let mut values = vec![0u64; first.values.len()];
    for m in masked {
        for (acc, v) in values.iter_mut().zip(&m.values) {
            *acc = codec.add(*acc, *v);
        }
    }
    Ok(MaskedVector {
        round: first.round,
        sender: AGGREGATOR_SENDER,
        coords: first.coords.clone(),
        values,
        weight_tag: first.weight_tag,
    })
}

/// Removes every member's common mask and decodes the sum.
pub fn unmask(
    sum: &AggregateSum,
    common_seed: &Seed,
    channel: Channel,
    cohort: &[PartnerId],
    codec: &FixedPointCodec,
) -> Vec<f64> {
    let mut values = sum.values.clone();
    for &party in cohort {
        let mut s = common_stream(common_seed, channel, sum.round as u32, party);
        for v in values.iter_mut() {
            *v = codec.sub(*v, codec.reduce(s.next_u64()));
        }
    }
    codec.decode_slice(&values)
}

/// Dense delta that is zero outside `coords`.
pub fn scatter_update(dense_dim: usize, coords: &[u64], values: &[f64]) -> Result<Vec<f64>, SecAggError> {
    if coords.len() != values.len() {
        return Err(SecAggError::CoordsMismatch);
    }
    let mut out = vec![0.0; dense_dim];
    for (&c, &v) in coords.iter().zip(values) {
        let slot = out.get_mut(c as usize).ok_or(SecAggError::CoordOutOfRange {
            coord: c,
            dim: dense_dim,
        })?;
        *slot = v;
    }
    Ok(out)
}
