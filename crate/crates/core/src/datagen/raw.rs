//! Synthetic activity records drawn from a planted low-rank model.
//!
//! Each compound carries a hashed fingerprint `x`. A world-wide projection
//! `A` (dim × rank) maps it to a latent `z = Aᵀx`, and every assay `t` reads
//! `value = 6 + w_tᵀz + ε` with Gaussian `ε`. Because `A` is shared by all
//! partners the trunk has something common to learn, while the assay weights
//! `w_t` are partner-private (or world-wide for catalogue assays).

use std::collections::HashSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::featurize::featurize_indices;
use crate::primitives::{derive_stream, Purpose, Seed, StreamId};

/// Catalogue assays use task ids at and above this base.
pub const CATALOGUE_TASK_BASE: u32 = 1 << 20;
/// Compound ids from the shared pool have no partner tag in bits 48..56.
const PARTNER_TAG_SHIFT: u32 = 48;
const ID_MASK: u64 = (1 << PARTNER_TAG_SHIFT) - 1;
const BASE_ACTIVITY: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Qualifier {
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = ">")]
    Gt,
}

impl Qualifier {
    /// Numeric code stored in the censor matrix.
    pub fn code(self) -> f64 {
        match self {
            Qualifier::Eq => 0.0,
            Qualifier::Lt => -1.0,
            Qualifier::Gt => 1.0,
        }
    }

    pub fn from_code(code: f64) -> Self {
        if code < 0.0 {
            Qualifier::Lt
        } else if code > 0.0 {
            Qualifier::Gt
        } else {
            Qualifier::Eq
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivityRecord {
    pub compound_id: u64,
    pub task_id: u32,
    pub value: f64,
    pub qualifier: Qualifier,
    pub is_auxiliary: bool,
}

#[derive(Debug, Error, PartialEq)]
pub enum GenError {
    #[error("n_compounds and n_tasks must be positive")]
    Empty,
    #[error("overlap fraction {0} outside [0, 1]")]
    BadOverlap(f64),
    #[error("partner index {0} too large")]
    PartnerIndex(u32),
    #[error("invalid generator parameter: {0}")]
    Param(&'static str),
}

/// Compounds common to all partners. `fraction` of each partner's compounds
/// are the first entries of the pool, so equal fractions give equal sets.
#[derive(Clone, Copy, Debug)]
pub struct SharedPool {
    pub world_seed: Seed,
    pub fraction: f64,
}

impl SharedPool {
    pub fn compound_id(&self, index: u64) -> u64 {
        let mut s = derive_stream(&self.world_seed, StreamId::item(Purpose::DataGen, index));
        s.next_u64_masked()
    }
}

trait MaskedDraw {
    fn next_u64_masked(&mut self) -> u64;
}

impl<R: Rng> MaskedDraw for R {
    fn next_u64_masked(&mut self) -> u64 {
        self.next_u64() & ID_MASK
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawConfig {
    pub n_compounds: usize,
    pub n_tasks: usize,
    pub n_aux_tasks: usize,
    pub n_catalogue_tasks: usize,
    pub feature_dim: usize,
    pub n_active: usize,
    pub latent_rank: usize,
    /// Main-task measurements per compound.
    pub measurements_per_compound: usize,
    /// Probability that a compound also has an auxiliary measurement.
    pub aux_rate: f64,
    /// Probability that a compound has a catalogue measurement (catalogue members only).
    pub catalogue_rate: f64,
    pub replicate_rate: f64,
    pub censor_rate: f64,
    /// Probability of an implausible value (NaN or far out of range).
    pub junk_rate: f64,
    pub noise_sd: f64,
}

impl Default for RawConfig {
    fn default() -> Self {
        Self {
            n_compounds: 12_000,
            n_tasks: 120,
            n_aux_tasks: 20,
            n_catalogue_tasks: 0,
            feature_dim: 4096,
            n_active: 32,
            latent_rank: 8,
            measurements_per_compound: 1,
            aux_rate: 0.1,
            catalogue_rate: 0.3,
            replicate_rate: 0.05,
            censor_rate: 0.1,
            junk_rate: 0.01,
            noise_sd: 0.5,
        }
    }
}

impl RawConfig {
    /// A small, label-dense corpus for training experiments.
    pub fn bench() -> Self {
        Self {
            n_compounds: 600,
            n_tasks: 8,
            n_aux_tasks: 2,
            n_catalogue_tasks: 0,
            feature_dim: 256,
            n_active: 12,
            latent_rank: 4,
            measurements_per_compound: 3,
            aux_rate: 0.5,
            catalogue_rate: 0.5,
            replicate_rate: 0.05,
            censor_rate: 0.1,
            junk_rate: 0.01,
            noise_sd: 0.3,
        }
    }

    fn check(&self) -> Result<(), GenError> {
        if self.n_compounds == 0 || self.n_tasks == 0 {
            return Err(GenError::Empty);
        }
        if self.n_active == 0 || self.n_active >= self.feature_dim {
            return Err(GenError::Param("n_active must be in 1..feature_dim"));
        }
        if self.latent_rank == 0 {
            return Err(GenError::Param("latent_rank must be positive"));
        }
        if self.measurements_per_compound == 0 || self.measurements_per_compound > self.n_tasks {
            return Err(GenError::Param("measurements_per_compound must be in 1..=n_tasks"));
        }
        if !(self.noise_sd > 0.0) {
            return Err(GenError::Param("noise_sd must be positive"));
        }
        Ok(())
    }
}

/// Identity and key of one data-owning partner.
#[derive(Clone, Copy, Debug)]
pub struct PartnerSpec {
    pub index: u32,
    pub seed: Seed,
    pub in_catalogue: bool,
}

/// The planted model shared by every partner.
struct World {
    rank: usize,
    projection: Vec<f64>, // feature_dim × rank
    catalogue_weights: Vec<Vec<f64>>,
}

impl World {
    fn new(seed: &Seed, cfg: &RawConfig) -> Self {
        let mut s = derive_stream(seed, StreamId::item(Purpose::DataGen, 1 << 55));
        let col = Normal::new(0.0, 1.0 / (cfg.n_active as f64).sqrt()).unwrap();
        let projection = (0..cfg.feature_dim * cfg.latent_rank)
            .map(|_| col.sample(&mut s))
            .collect();
        let w = Normal::new(0.0, 1.0 / (cfg.latent_rank as f64).sqrt()).unwrap();
        let catalogue_weights = (0..cfg.n_catalogue_tasks)
            .map(|_| (0..cfg.latent_rank).map(|_| w.sample(&mut s)).collect())
            .collect();
        Self {
            rank: cfg.latent_rank,
            projection,
            catalogue_weights,
        }
    }

    fn latent(&self, compound_id: u64, cfg: &RawConfig) -> Vec<f64> {
        let mut z = vec![0.0; self.rank];
        for j in featurize_indices(compound_id, cfg.feature_dim, cfg.n_active) {
            let row = &self.projection[j * self.rank..(j + 1) * self.rank];
            z.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        z
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Draws one partner's raw records.
///
/// `round(pool.fraction · n_compounds)` compounds come from the shared pool,
/// the rest carry a partner tag in their id and are therefore disjoint
/// across partners.
pub fn generate_raw(
    partner: &PartnerSpec,
    cfg: &RawConfig,
    pool: &SharedPool,
) -> Result<Vec<ActivityRecord>, GenError> {
    cfg.check()?;
    if !(0.0..=1.0).contains(&pool.fraction) {
        return Err(GenError::BadOverlap(pool.fraction));
    }
    if partner.index >= 255 {
        return Err(GenError::PartnerIndex(partner.index));
    }
    let world = World::new(&pool.world_seed, cfg);
    let mut rng = derive_stream(&partner.seed, StreamId::item(Purpose::DataGen, 0));

    let n_shared = (pool.fraction * cfg.n_compounds as f64).round() as usize;
    let mut compounds: Vec<u64> = (0..n_shared as u64).map(|i| pool.compound_id(i)).collect();
    let mut seen: HashSet<u64> = compounds.iter().copied().collect();
    let tag = (partner.index as u64 + 1) << PARTNER_TAG_SHIFT;
    while compounds.len() < cfg.n_compounds {
        let id = tag | rng.next_u64_masked();
        if seen.insert(id) {
            compounds.push(id);
        }
    }

    let wdist = Normal::new(0.0, 1.0 / (cfg.latent_rank as f64).sqrt()).unwrap();
    let task_weights: Vec<Vec<f64>> = (0..cfg.n_tasks + cfg.n_aux_tasks)
        .map(|_| (0..cfg.latent_rank).map(|_| wdist.sample(&mut rng)).collect())
        .collect();
    let noise = Normal::new(0.0, cfg.noise_sd).unwrap();

    let mut records = Vec::new();
    for &cid in &compounds {
        let z = world.latent(cid, cfg);
        let mut assays: Vec<(u32, &[f64], bool, bool)> = Vec::new();
        for t in rand::seq::index::sample(&mut rng, cfg.n_tasks, cfg.measurements_per_compound) {
            assays.push((t as u32, &task_weights[t], false, true));
        }
        if cfg.n_aux_tasks > 0 && rng.gen_bool(cfg.aux_rate) {
            let a = cfg.n_tasks + rng.gen_range(0..cfg.n_aux_tasks);
            assays.push((a as u32, &task_weights[a], true, false));
        }
        if partner.in_catalogue && cfg.n_catalogue_tasks > 0 && rng.gen_bool(cfg.catalogue_rate) {
            let k = rng.gen_range(0..cfg.n_catalogue_tasks);
            assays.push((
                CATALOGUE_TASK_BASE + k as u32,
                &world.catalogue_weights[k],
                false,
                false,
            ));
        }
        for (task_id, w, is_auxiliary, censorable) in assays {
            let signal = BASE_ACTIVITY + dot(w, &z);
            let n_rep = if rng.gen_bool(cfg.replicate_rate) {
                rng.gen_range(2..=3)
            } else {
                1
            };
            let censored = censorable && rng.gen_bool(cfg.censor_rate);
            let direction = if rng.gen_bool(0.5) {
                Qualifier::Gt
            } else {
                Qualifier::Lt
            };
            for _ in 0..n_rep {
                let mut value = signal + noise.sample(&mut rng);
                let mut qualifier = Qualifier::Eq;
                if censored {
                    // a bound on the true value: "> v" sits below it, "< v" above
                    let gap: f64 = rng.gen_range(0.0..0.5);
                    qualifier = direction;
                    value += if direction == Qualifier::Gt { -gap } else { gap };
                }
                if rng.gen_bool(cfg.junk_rate) {
                    value = if rng.gen_bool(0.5) { f64::NAN } else { 1.0e6 };
                }
                records.push(ActivityRecord {
                    compound_id: cid,
                    task_id,
                    value,
                    qualifier,
                    is_auxiliary,
                });
            }
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small() -> RawConfig {
        RawConfig {
            n_compounds: 200,
            n_tasks: 5,
            n_aux_tasks: 1,
            feature_dim: 128,
            n_active: 8,
            ..RawConfig::default()
        }
    }

    fn ids(records: &[ActivityRecord]) -> BTreeSet<u64> {
        records.iter().map(|r| r.compound_id).collect()
    }

    fn partner(i: u32) -> PartnerSpec {
        PartnerSpec {
            index: i,
            seed: Seed::from_u64(100 + i as u64),
            in_catalogue: false,
        }
    }

    #[test]
    fn no_overlap_means_disjoint_compounds() {
        let pool = SharedPool {
            world_seed: Seed::from_u64(1),
            fraction: 0.0,
        };
        let a = ids(&generate_raw(&partner(0), &small(), &pool).unwrap());
        let b = ids(&generate_raw(&partner(1), &small(), &pool).unwrap());
        assert!(a.is_disjoint(&b));
    }

    #[test]
    fn full_overlap_means_identical_compounds() {
        let pool = SharedPool {
            world_seed: Seed::from_u64(1),
            fraction: 1.0,
        };
        let a = ids(&generate_raw(&partner(0), &small(), &pool).unwrap());
        let b = ids(&generate_raw(&partner(1), &small(), &pool).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn deterministic() {
        let pool = SharedPool {
            world_seed: Seed::from_u64(1),
            fraction: 0.3,
        };
        let a = generate_raw(&partner(0), &small(), &pool).unwrap();
        let b = generate_raw(&partner(0), &small(), &pool).unwrap();
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }

    #[test]
    fn rejects_bad_inputs() {
        let pool = SharedPool {
            world_seed: Seed::from_u64(1),
            fraction: 1.5,
        };
        assert_eq!(
            generate_raw(&partner(0), &small(), &pool),
            Err(GenError::BadOverlap(1.5))
        );
        let pool = SharedPool {
            fraction: 0.5,
            ..pool
        };
        let empty = RawConfig {
            n_tasks: 0,
            ..small()
        };
        assert_eq!(generate_raw(&partner(0), &empty, &pool), Err(GenError::Empty));
    }
}
