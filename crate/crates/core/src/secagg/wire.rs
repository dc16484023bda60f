//! Little-endian wire encoding of [`MaskedVector`]:
//! `round u64, sender u32, k u64, coords u64[k], values u64[k], weight_tag u8`.

use super::protocol::MaskedVector;
use super::SecAggError;

impl MaskedVector {
    pub fn encoded_len(&self) -> usize {
        8 + 4 + 8 + 16 * self.coords.len() + 1
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.sender.to_le_bytes());
        out.extend_from_slice(&(self.coords.len() as u64).to_le_bytes());
        for c in &self.coords {
            out.extend_from_slice(&c.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(self.weight_tag);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SecAggError> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], SecAggError> {
            let s = bytes.get(pos..pos + n).ok_or(SecAggError::Wire("truncated message"))?;
            pos += n;
            Ok(s)
        };
        let round = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let sender = u32::from_le_bytes(take(4)?.try_into().unwrap());
        let k = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let k = usize::try_from(k).map_err(|_| SecAggError::Wire("k too large"))?;
        if k.checked_mul(16).is_none_or(|n| n > bytes.len()) {
            return Err(SecAggError::Wire("k exceeds message length"));
        }
        let mut read_u64s = |n: usize| -> Result<Vec<u64>, SecAggError> {
            take(8 * n).map(|s| {
                s.chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            })
        };
        let coords = read_u64s(k)?;
        let values = read_u64s(k)?;
        let weight_tag = take(1)?[0];
        if pos != bytes.len() {
            return Err(SecAggError::Wire("trailing bytes"));
        }
        if coords.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SecAggError::Wire("coords not strictly increasing"));
        }
        Ok(Self {
            round,
            sender,
            coords,
            values,
            weight_tag,
        })
    }
}
