//! Cross-silo federated training of shared-trunk / private-head sparse
//! multi-task models with masked secure aggregation.

pub mod datagen;
pub mod eval;
pub mod federation;
pub mod model;
pub mod primitives;
pub mod privacy;
pub mod secagg;
