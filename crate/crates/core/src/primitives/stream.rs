//! Keyed deterministic random streams.
//!
//! Every random draw in the crate comes from a [`SeededStream`] obtained via
//! [`derive_stream`]. A stream is ChaCha20 keyed by a 256-bit [`Seed`] with the
//! 64-bit [`StreamId`] selecting the ChaCha stream, so identical
//! `(seed, stream_id)` pairs replay bit-identically.

use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// A 256-bit key.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Seed(pub [u8; 32]);

impl fmt::Debug for Seed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Seed(")?;
        for b in &self.0[..4] {
            write!(f, "{b:02x}")?;
        }
        write!(f, "..)")
    }
}

impl Seed {
    /// Expands a small integer seed (e.g. a CLI `--seed`) into a key.
    pub fn from_u64(master: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&master.to_le_bytes());
        key[8..16].copy_from_slice(b"fedsilo\0");
        // Pass through the stream once so nearby integers give unrelated keys.
        let mut s = derive_stream(&Seed(key), StreamId::item(Purpose::KeyDerivation, 0));
        let mut out = [0u8; 32];
        s.fill_bytes(&mut out);
        Seed(out)
    }

    /// Independent child key for a purpose and index.
    pub fn child(&self, purpose: Purpose, index: u64) -> Seed {
        let mut s = derive_stream(self, StreamId::item(purpose, index));
        let mut out = [0u8; 32];
        s.fill_bytes(&mut out);
        Seed(out)
    }
}

/// Domain tag carried in the top byte of every [`StreamId`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    KeyDerivation = 1,
    PairMask = 2,
    CommonMask = 3,
    Subset = 4,
    TrunkInit = 5,
    HeadInit = 6,
    Batch = 7,
    DataGen = 8,
    Featurize = 9,
    Fold = 10,
    Attack = 11,
    Anonymize = 12,
    CataloguePairMask = 13,
    CatalogueCommonMask = 14,
    CatalogueInit = 15,
}

/// Sentinel party index used for the common-mask label's peer slot.
pub const COMMON_PEER: u16 = u16::MAX;

/// A 64-bit stream label: `purpose(8) | round(24) | a(16) | b(16)` for
/// protocol streams, or `purpose(8) | index(56)` for item streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamId(u64);

impl StreamId {
    pub fn new(purpose: Purpose, round: u32, a: u16, b: u16) -> Self {
        assert!(round < (1 << 24), "round index exceeds 24 bits");
        Self(((purpose as u64) << 56) | ((round as u64) << 32) | ((a as u64) << 16) | b as u64)
    }

    /// Label for an item-indexed stream (compound ids, trial numbers, ...).
    pub fn item(purpose: Purpose, index: u64) -> Self {
        assert!(index < (1 << 56), "item index exceeds 56 bits");
        Self(((purpose as u64) << 56) | index)
    }

    /// Pairwise-mask label; `(i, j)` and `(j, i)` map to the same label.
    pub fn pair(purpose: Purpose, round: u32, i: u16, j: u16) -> Self {
        let (lo, hi) = if i < j { (i, j) } else { (j, i) };
        Self::new(purpose, round, lo, hi)
    }

    /// Common-mask label for one party.
    pub fn common(purpose: Purpose, round: u32, party: u16) -> Self {
        Self::new(purpose, round, party, COMMON_PEER)
    }

    pub fn raw(self) -> u64 {
        self.0
    }
}

/// A deterministic random stream; single consumer.
#[derive(Clone, Debug)]
pub struct SeededStream {
    rng: ChaCha20Rng,
}

/// Keyed stream for `(seed, stream_id)`.
pub fn derive_stream(seed: &Seed, stream_id: StreamId) -> SeededStream {
    let mut rng = ChaCha20Rng::from_seed(seed.0);
    rng.set_stream(stream_id.raw());
    SeededStream { rng }
}

impl RngCore for SeededStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}
