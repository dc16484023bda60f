//! Hashed synthetic fingerprints and fold assignment.

use rand::Rng;

use crate::primitives::{derive_stream, CsrMatrix, Purpose, Seed, StreamId};

/// Fixed key for fingerprint hashing; identical at every partner.
const FINGERPRINT_KEY: Seed = Seed(*b"fedsilo synthetic fingerprint v1");

/// Sorted indices of the `n_active` set bits of a compound's fingerprint.
pub fn featurize_indices(compound_id: u64, dim: usize, n_active: usize) -> Vec<usize> {
    assert!(n_active < dim, "n_active must be below dim");
    let mut s = derive_stream(&FINGERPRINT_KEY, StreamId::item(Purpose::Featurize, compound_id));
    let mut idx = rand::seq::index::sample(&mut s, dim, n_active).into_vec();
    idx.sort_unstable();
    idx
}

/// Binary fingerprint row as `(col, 1.0)` pairs.
pub fn featurize(compound_id: u64, dim: usize, n_active: usize) -> Vec<(usize, f64)> {
    featurize_indices(compound_id, dim, n_active)
        .into_iter()
        .map(|c| (c, 1.0))
        .collect()
}

/// Feature matrix for a list of compounds.
pub fn featurize_matrix(compound_ids: &[u64], dim: usize, n_active: usize) -> CsrMatrix {
    let rows: Vec<_> = compound_ids
        .iter()
        .map(|&c| featurize(c, dim, n_active))
        .collect();
    CsrMatrix::from_rows(dim, &rows).expect("fingerprints are well formed")
}

/// Fold of a compound; depends only on its id so shared compounds land in
/// the same fold at every partner.
pub fn assign_fold(compound_id: u64, n_folds: u8, fold_seed: &Seed) -> u8 {
    assert!(n_folds >= 2, "need at least two folds");
    let mut s = derive_stream(fold_seed, StreamId::item(Purpose::Fold, compound_id));
    s.gen_range(0..n_folds)
}
