//! Sparse matrices, the fixed-point ring codec and seeded randomness.

pub mod csr;
pub mod fixed;
pub mod stream;

pub use csr::{CsrError, CsrMatrix};
pub use fixed::{CodecError, FixedPointCodec, RingElem};
pub use stream::{derive_stream, Purpose, Seed, SeededStream, StreamId};
