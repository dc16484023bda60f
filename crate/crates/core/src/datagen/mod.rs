//! Synthetic multi-partner bioactivity data.
//!
//! [`raw`] draws activity records, [`prepare`](prepare::prepare) turns them
//! into the minimal bundle a partner registers for training.

pub mod bundle;
pub mod featurize;
pub mod prepare;
pub mod raw;

use serde::{Deserialize, Serialize};

pub use bundle::{BundleError, DatasetBundle, Labels, TaskKind, TaskMeta};
pub use featurize::{assign_fold, featurize, featurize_matrix};
pub use prepare::{apply_quorum, prepare, PrepConfig, PrepError, Variant};
pub use raw::{
    generate_raw, ActivityRecord, GenError, PartnerSpec, Qualifier, RawConfig, SharedPool,
    CATALOGUE_TASK_BASE,
};

use crate::primitives::{Purpose, Seed};

/// Everything needed to produce one bundle per partner from a master seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub partners: usize,
    pub variant: Variant,
    pub raw: RawConfig,
    pub overlap: f64,
    pub quorum: usize,
    pub n_folds: u8,
    /// Partners contributing to the catalogue head.
    #[serde(default)]
    pub catalogue_partners: Vec<u32>,
}

impl GenConfig {
    pub fn new(partners: usize, variant: Variant) -> Self {
        Self {
            partners,
            variant,
            raw: RawConfig::default(),
            overlap: 0.1,
            quorum: 5,
            n_folds: 5,
            catalogue_partners: Vec::new(),
        }
    }

    /// Small label-dense corpus used by training experiments.
    pub fn bench(partners: usize, variant: Variant) -> Self {
        Self {
            raw: RawConfig::bench(),
            overlap: 0.2,
            quorum: 3,
            ..Self::new(partners, variant)
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DatagenError {
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error("partner {partner}: {source}")]
    Prep { partner: usize, source: PrepError },
}

/// Seeds derived from the master seed for data generation.
pub fn world_seed(master: &Seed) -> Seed {
    master.child(Purpose::DataGen, 0)
}

pub fn partner_data_seed(master: &Seed, partner: usize) -> Seed {
    master.child(Purpose::DataGen, 1 + partner as u64)
}

pub fn fold_seed(master: &Seed) -> Seed {
    master.child(Purpose::Fold, 0)
}

/// Generates and prepares bundles for every partner.
pub fn generate_bundles(master: &Seed, cfg: &GenConfig) -> Result<Vec<DatasetBundle>, DatagenError> {
    use rayon::prelude::*;
    let pool = SharedPool {
        world_seed: world_seed(master),
        fraction: cfg.overlap,
    };
    (0..cfg.partners)
        .into_par_iter()
        .map(|p| {
            let in_catalogue = cfg.catalogue_partners.contains(&(p as u32));
            let spec = PartnerSpec {
                index: p as u32,
                seed: partner_data_seed(master, p),
                in_catalogue,
            };
            let records = generate_raw(&spec, &cfg.raw, &pool)?;
            let mut prep =
                PrepConfig::new(cfg.variant, fold_seed(master), cfg.raw.feature_dim, cfg.raw.n_active);
            prep.quorum = cfg.quorum;
            prep.n_folds = cfg.n_folds;
            prep.n_catalogue_tasks = cfg.raw.n_catalogue_tasks;
            prep.catalogue_partners = cfg.catalogue_partners.clone();
            prep.in_catalogue = in_catalogue;
            prepare(&records, &prep).map_err(|source| DatagenError::Prep { partner: p, source })
        })
        .collect()
}
