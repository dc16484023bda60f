//! Fixed-point encoding of reals into the ring `Z / 2^ring_bits`.
//!
//! Additive masks only cancel exactly in modular integer arithmetic, so every
//! real that enters the secure-aggregation protocol goes through this codec.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("invalid codec parameters: scale_bits={scale_bits}, ring_bits={ring_bits}")]
    InvalidParams { scale_bits: u32, ring_bits: u32 },
    #[error("value {value} outside the representable range ±{limit}")]
    Overflow { value: f64, limit: f64 },
}

/// Ring element; only the low `ring_bits` bits are meaningful.
pub type RingElem = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedPointCodec {
    scale_bits: u32,
    ring_bits: u32,
}

impl Default for FixedPointCodec {
    /// 64-bit ring with 24 fractional bits: ~39 integer bits of headroom.
    fn default() -> Self {
        Self {
            scale_bits: 24,
            ring_bits: 64,
        }
    }
}

impl FixedPointCodec {
    pub fn new(scale_bits: u32, ring_bits: u32) -> Result<Self, CodecError> {
        if scale_bits == 0 || scale_bits >= ring_bits || ring_bits > 64 {
            return Err(CodecError::InvalidParams {
                scale_bits,
                ring_bits,
            });
        }
        Ok(Self {
            scale_bits,
            ring_bits,
        })
    }

    pub fn scale_bits(&self) -> u32 {
        self.scale_bits
    }

    pub fn ring_bits(&self) -> u32 {
        self.ring_bits
    }

    /// Quantization step `2^-scale_bits`.
    pub fn resolution(&self) -> f64 {
        (-(self.scale_bits as f64)).exp2()
    }

    /// Largest magnitude accepted by [`encode`](Self::encode).
    pub fn limit(&self) -> f64 {
        ((self.ring_bits - self.scale_bits - 1) as f64).exp2()
    }

    /// Bit mask selecting the low `ring_bits` bits.
    pub fn modulus_mask(&self) -> u64 {
        if self.ring_bits == 64 {
            u64::MAX
        } else {
            (1u64 << self.ring_bits) - 1
        }
    }

    #[inline]
    pub fn reduce(&self, r: u64) -> RingElem {
        r & self.modulus_mask()
    }

    #[inline]
    pub fn add(&self, a: RingElem, b: RingElem) -> RingElem {
        self.reduce(a.wrapping_add(b))
    }

    #[inline]
    pub fn sub(&self, a: RingElem, b: RingElem) -> RingElem {
        self.reduce(a.wrapping_sub(b))
    }

    #[inline]
    pub fn neg(&self, a: RingElem) -> RingElem {
        self.reduce(a.wrapping_neg())
    }

    /// `round(x · 2^scale_bits) mod 2^ring_bits`, two's complement for negatives.
    pub fn encode(&self, x: f64) -> Result<RingElem, CodecError> {
        let limit = self.limit();
        if !x.is_finite() || x.abs() >= limit {
            return Err(CodecError::Overflow { value: x, limit });
        }
        let scaled = (x * (self.scale_bits as f64).exp2()).round() as i64;
        Ok(self.reduce(scaled as u64))
    }

    /// Inverse of `encode` up to quantization. Elements at or above the ring
    /// midpoint decode as negative.
    pub fn decode(&self, r: RingElem) -> f64 {
        let r = self.reduce(r);
        let signed = if self.ring_bits == 64 {
            r as i64
        } else {
            let half = 1u64 << (self.ring_bits - 1);
            if r >= half {
                -((self.modulus_mask() - r + 1) as i64)
            } else {
                r as i64
            }
        };
        signed as f64 * self.resolution()
    }

    pub fn encode_slice(&self, xs: &[f64]) -> Result<Vec<RingElem>, CodecError> {
        xs.iter().map(|&x| self.encode(x)).collect()
    }

    pub fn decode_slice(&self, rs: &[RingElem]) -> Vec<f64> {
        rs.iter().map(|&r| self.decode(r)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn codec16() -> FixedPointCodec {
        FixedPointCodec::new(16, 64).unwrap()
    }

    #[test]
    fn encode_fixed_values() {
        let c = codec16();
        assert_eq!(c.encode(0.0).unwrap(), 0);
        assert_eq!(c.encode(1.0).unwrap(), 65536);
        assert_eq!(c.decode(0), 0.0);
        assert_eq!(c.decode(0u64.wrapping_sub(65536)), -1.0);
    }

    #[test]
    fn negative_wrap_in_small_ring() {
        let c = FixedPointCodec::new(8, 32).unwrap();
        let r = c.encode(-1.0).unwrap();
        assert_eq!(r, (1u64 << 32) - 256);
        assert_eq!(c.decode(r), -1.0);
        assert_eq!(c.decode(c.add(r, c.encode(3.0).unwrap())), 2.0);
    }

    #[test]
    fn round_trip_random() {
        let c = codec16();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let x: f64 = rng.gen_range(-10.0..10.0);
            let back = c.decode(c.encode(x).unwrap());
            assert!((back - x).abs() <= c.resolution());
        }
    }

    #[test]
    fn additive_homomorphism() {
        let c = codec16();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..1000 {
            let a: f64 = rng.gen_range(-10.0..10.0);
            let b: f64 = rng.gen_range(-10.0..10.0);
            let s = c.add(c.encode(a).unwrap(), c.encode(b).unwrap());
            assert!((c.decode(s) - (a + b)).abs() <= 2.0 * c.resolution());
        }
    }

    #[test]
    fn sum_of_sixteen_stays_within_tolerance() {
        let c = FixedPointCodec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..200 {
            let xs: Vec<f64> = (0..16).map(|_| rng.gen_range(-100.0..100.0)).collect();
            let sum = xs
                .iter()
                .fold(0u64, |acc, &x| c.add(acc, c.encode(x).unwrap()));
            let want: f64 = xs.iter().sum();
            assert!((c.decode(sum) - want).abs() <= 16.0 * c.resolution());
        }
    }

    #[test]
    fn overflow_and_bad_params() {
        let c = FixedPointCodec::new(24, 32).unwrap();
        assert!(matches!(c.encode(200.0), Err(CodecError::Overflow { .. })));
        assert!(c.encode(f64::NAN).is_err());
        assert!(FixedPointCodec::new(0, 64).is_err());
        assert!(FixedPointCodec::new(64, 64).is_err());
        assert!(FixedPointCodec::new(10, 65).is_err());
    }
}
