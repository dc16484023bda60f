//! Leakage experiments: gradient-similarity membership inference against
//! single, aggregated and masked updates, and the join/leave
//! differentiation attack.
//!
//! Trials deliberately use small batches on a fixed snapshot so that leakage
//! is measurable at desk scale.

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::DatasetBundle;
use crate::model::{backward, GradientUpdate, ModelError, ModelParams};
use crate::primitives::{derive_stream, CsrError, FixedPointCodec, Purpose, Seed, SeededStream, StreamId};
use crate::secagg::{aggregate, apply_weight, mask, provision, PublicTotals, SecAggError, WeightingScheme};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AttackKind {
    MiaSingle,
    MiaAggregate,
    MiaMasked,
    Differentiation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub kind: AttackKind,
    pub accuracy: f64,
    pub advantage: f64,
    pub n_trials: usize,
    pub target: String,
}

impl AttackResult {
    fn new(kind: AttackKind, correct: usize, n_trials: usize, target: String) -> Self {
        let accuracy = correct as f64 / n_trials.max(1) as f64;
        Self {
            kind,
            accuracy,
            advantage: accuracy - 0.5,
            n_trials,
            target,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PrivacyError {
    #[error("dimension mismatch: update has {got} entries, snapshot trunk has {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid experiment setting `{field}`: {message}")]
    Config { field: &'static str, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Csr(#[from] CsrError),
    #[error(transparent)]
    SecAgg(#[from] SecAggError),
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Gradient of one pool row on the snapshot.
fn row_gradient(snapshot: &ModelParams, pool: &DatasetBundle, rows: &[usize]) -> Result<GradientUpdate, PrivacyError> {
    let x = pool.x.select_rows(rows)?;
    let y = pool.labels.select_rows(rows)?;
    Ok(backward(snapshot, &x, &y, &pool.tasks)?.1)
}

/// Membership score of a probe row against an observed trunk update: the
/// cosine similarity, on the first-layer weights, between the update and the
/// probe's own gradient at the snapshot.
pub fn mia_score(
    observed_trunk: &[f64],
    snapshot: &ModelParams,
    pool: &DatasetBundle,
    probe_row: usize,
) -> Result<f64, PrivacyError> {
    if observed_trunk.len() != snapshot.trunk_len() {
        return Err(PrivacyError::Dimension {
            expected: snapshot.trunk_len(),
            got: observed_trunk.len(),
        });
    }
    let w0 = snapshot.trunk[0].w.len();
    let g = row_gradient(snapshot, pool, &[probe_row])?;
    Ok(cosine(&observed_trunk[..w0], &g.trunk_grad[..w0]))
}

/// Threshold maximizing accuracy on labelled calibration scores.
pub fn calibrate_threshold(members: &[f64], non_members: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = members
        .iter()
        .map(|&s| (s, true))
        .chain(non_members.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // predict "member" for score > threshold; start with everything above
    let mut correct = members.len();
    let mut best = (correct, f64::NEG_INFINITY);
    for (i, &(s, is_member)) in all.iter().enumerate() {
        if is_member {
            correct -= 1;
        } else {
            correct += 1;
        }
        let next = all.get(i + 1).map(|n| n.0);
        if next != Some(s) && correct > best.0 {
            let thr = match next {
                Some(n) => 0.5 * (s + n),
                None => s,
            };
            best = (correct, thr);
        }
    }
    best.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaConfig {
    /// Partners whose updates are summed in what the attacker observes.
    pub partners: usize,
    pub batch_size: usize,
    /// Balanced member/non-member trials used for scoring.
    pub n_trials: usize,
    pub n_calibration: usize,
    /// Observe masked vectors (server view) instead of plaintext updates.
    pub masked: bool,
}

impl MiaConfig {
    pub fn new(partners: usize) -> Self {
        Self {
            partners,
            batch_size: 64,
            n_trials: 200,
            n_calibration: 200,
            masked: false,
        }
    }

    fn validate(&self, pool: &DatasetBundle) -> Result<(), PrivacyError> {
        let bad = |field, message: &str| {
            Err(PrivacyError::Config {
                field,
                message: message.to_string(),
            })
        };
        if self.partners == 0 || self.partners >= u16::MAX as usize {
            return bad("partners", "must be between 1 and 65534");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.n_trials < 2 || self.n_calibration < 2 {
            return bad("n_trials", "need at least two trials");
        }
        if self.partners * self.batch_size + 1 > pool.n_rows() {
            return bad("batch_size", "pool too small for the requested batches");
        }
        Ok(())
    }
}

fn trial_rng(seed: &Seed, phase: u64, trial: usize) -> SeededStream {
    derive_stream(seed, StreamId::item(Purpose::Attack, (phase << 40) | trial as u64))
}

/// What the attacker observes in one trial, plus the probe.
fn mia_trial(
    cfg: &MiaConfig,
    pool: &DatasetBundle,
    snapshot: &ModelParams,
    seed: &Seed,
    phase: u64,
    trial: usize,
) -> Result<(f64, bool), PrivacyError> {
    let mut rng = trial_rng(seed, phase, trial);
    let member = trial % 2 == 0;
    let need = cfg.partners * cfg.batch_size + 1;
    let picked = sample(&mut rng, pool.n_rows(), need).into_vec();
    let probe = picked[0];
    let mut batches: Vec<Vec<usize>> = picked[1..].chunks(cfg.batch_size).map(|c| c.to_vec()).collect();
    let target = rng.gen_range(0..cfg.partners);
    if member {
        let slot = rng.gen_range(0..cfg.batch_size);
        batches[target][slot] = probe;
    }
    let grads: Vec<GradientUpdate> = batches
        .iter()
        .map(|b| row_gradient(snapshot, pool, b))
        .collect::<Result<_, _>>()?;
    let totals = PublicTotals {
        n_partners: cfg.partners as u64,
        total_samples: grads.iter().map(|g| g.n_samples as u64).sum(),
        total_nnz: grads.iter().map(|g| g.nnz as u64).sum(),
    };
    let weighted: Vec<Vec<f64>> = grads
        .iter()
        .map(|g| apply_weight(g, WeightingScheme::DataProportional, &totals))
        .collect::<Result<_, _>>()?;
    let observed = if cfg.masked {
        let codec = FixedPointCodec::default();
        let ids: Vec<u32> = (0..cfg.partners as u32).collect();
        let setup = seed.child(Purpose::KeyDerivation, (phase << 40) | trial as u64);
        let (keys, server) = provision(&setup, 0, &ids, &[]);
        let coords: Vec<u64> = (0..snapshot.trunk_len() as u64).collect();
        let masked: Vec<_> = ids
            .iter()
            .map(|&i| mask(&weighted[i as usize], &keys[&i].trunk, i, 0, &coords, &codec, WeightingScheme::DataProportional))
            .collect::<Result<_, _>>()?;
        // the server decodes whatever it holds
        let sum = aggregate(&masked, &server.cohort, &codec)?;
        codec.decode_slice(&sum.values)
    } else {
        let mut sum = vec![0.0; snapshot.trunk_len()];
        for w in &weighted {
            sum.iter_mut().zip(w).for_each(|(a, b)| *a += b);
        }
        sum
    };
    Ok((mia_score(&observed, snapshot, pool, probe)?, member))
}

fn scores(
    cfg: &MiaConfig,
    pool: &DatasetBundle,
    snapshot: &ModelParams,
    seed: &Seed,
    phase: u64,
    n: usize,
) -> Result<Vec<(f64, bool)>, PrivacyError> {
    (0..n)
        .into_par_iter()
        .map(|t| mia_trial(cfg, pool, snapshot, seed, phase, t))
        .collect()
}

/// Membership inference on the observed update(s). The threshold is fit on
/// calibration trials and scored on fresh, balanced trials.
pub fn mia_experiment(
    cfg: &MiaConfig,
    pool: &DatasetBundle,
    snapshot: &ModelParams,
    seed: &Seed,
) -> Result<AttackResult, PrivacyError> {
    cfg.validate(pool)?;
    let calib = scores(cfg, pool, snapshot, seed, 1, cfg.n_calibration)?;
    let (m, n): (Vec<&(f64, bool)>, Vec<&(f64, bool)>) = calib.iter().partition(|s| s.1);
    let thr = calibrate_threshold(
        &m.iter().map(|s| s.0).collect::<Vec<_>>(),
        &n.iter().map(|s| s.0).collect::<Vec<_>>(),
    );
    let test = scores(cfg, pool, snapshot, seed, 2, cfg.n_trials)?;
    let correct = test.iter().filter(|&&(s, member)| (s > thr) == member).count();
    let kind = match (cfg.masked, cfg.partners) {
        (true, _) => AttackKind::MiaMasked,
        (false, 1) => AttackKind::MiaSingle,
        (false, _) => AttackKind::MiaAggregate,
    };
    Ok(AttackResult::new(
        kind,
        correct,
        test.len(),
        format!("partners={} batch={} masked={}", cfg.partners, cfg.batch_size, cfg.masked),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifferentiationConfig {
    pub partners: usize,
    /// Size of the group that leaves together; the churn policy's minimum.
    pub group_size: usize,
    pub rows_per_partner: usize,
    pub n_trials: usize,
    pub n_calibration: usize,
    /// When false nobody leaves: the null case.
    pub churn: bool,
}

impl DifferentiationConfig {
    pub fn new(group_size: usize) -> Self {
        Self {
            partners: 6,
            group_size,
            rows_per_partner: 4,
            n_trials: 100,
            n_calibration: 200,
            churn: true,
        }
    }
}

/// Full-batch aggregate of the listed partners' fixed datasets.
fn coalition_update(
    snapshot: &ModelParams,
    pool: &DatasetBundle,
    data: &[Vec<usize>],
    members: &[usize],
) -> Result<Vec<f64>, PrivacyError> {
    let grads: Vec<GradientUpdate> = members
        .iter()
        .map(|&p| row_gradient(snapshot, pool, &data[p]))
        .collect::<Result<_, _>>()?;
    let totals = PublicTotals {
        n_partners: members.len() as u64,
        total_samples: grads.iter().map(|g| g.n_samples as u64).sum(),
        total_nnz: grads.iter().map(|g| g.nnz as u64).sum(),
    };
    let mut sum = vec![0.0; snapshot.trunk_len()];
    for g in &grads {
        let w = apply_weight(g, WeightingScheme::DataProportional, &totals)?;
        sum.iter_mut().zip(&w).for_each(|(a, b)| *a += b);
    }
    Ok(sum)
}

/// Attributes a probe to a partner by watching the membership test across a
/// churn boundary.
///
/// In each trial the probe belongs to a member of the candidate group. If
/// the test flips from "member" before the boundary to "non-member" after
/// it, the attacker names a uniformly chosen group member; otherwise it
/// guesses, naming a group member or an outsider with equal odds. The
/// reported accuracy is the rate of naming the true owner.
pub fn differentiation_experiment(
    cfg: &DifferentiationConfig,
    pool: &DatasetBundle,
    snapshot: &ModelParams,
    seed: &Seed,
) -> Result<AttackResult, PrivacyError> {
    if cfg.group_size == 0 || cfg.group_size >= cfg.partners {
        return Err(PrivacyError::Config {
            field: "group_size",
            message: "must be between 1 and partners − 1".into(),
        });
    }
    if cfg.rows_per_partner == 0 || cfg.partners * cfg.rows_per_partner > pool.n_rows() {
        return Err(PrivacyError::Config {
            field: "rows_per_partner",
            message: "pool too small".into(),
        });
    }
    let layout = |rng: &mut SeededStream| -> Vec<Vec<usize>> {
        sample(rng, pool.n_rows(), cfg.partners * cfg.rows_per_partner)
            .into_vec()
            .chunks(cfg.rows_per_partner)
            .map(|c| c.to_vec())
            .collect()
    };

    // calibration: the attacker's own estimate of member/non-member scores
    let calib: Vec<(f64, f64)> = (0..cfg.n_calibration)
        .into_par_iter()
        .map(|t| -> Result<(f64, f64), PrivacyError> {
            let mut rng = trial_rng(seed, 3, t);
            let data = layout(&mut rng);
            let owner = rng.gen_range(0..cfg.partners);
            let probe = data[owner][rng.gen_range(0..cfg.rows_per_partner)];
            let all: Vec<usize> = (0..cfg.partners).collect();
            let without: Vec<usize> = all.iter().copied().filter(|&p| p != owner).collect();
            let s_in = mia_score(&coalition_update(snapshot, pool, &data, &all)?, snapshot, pool, probe)?;
            let s_out = mia_score(&coalition_update(snapshot, pool, &data, &without)?, snapshot, pool, probe)?;
            Ok((s_in, s_out))
        })
        .collect::<Result<_, _>>()?;
    let thr = calibrate_threshold(
        &calib.iter().map(|c| c.0).collect::<Vec<_>>(),
        &calib.iter().map(|c| c.1).collect::<Vec<_>>(),
    );

    let outcomes: Vec<bool> = (0..cfg.n_trials)
        .into_par_iter()
        .map(|t| -> Result<bool, PrivacyError> {
            let mut rng = trial_rng(seed, 4, t);
            let data = layout(&mut rng);
            let group = sample(&mut rng, cfg.partners, cfg.group_size).into_vec();
            let owner = group[rng.gen_range(0..group.len())];
            let probe = data[owner][rng.gen_range(0..cfg.rows_per_partner)];
            let all: Vec<usize> = (0..cfg.partners).collect();
            let after: Vec<usize> = if cfg.churn {
                all.iter().copied().filter(|p| !group.contains(p)).collect()
            } else {
                all.clone()
            };
            let before_score = mia_score(&coalition_update(snapshot, pool, &data, &all)?, snapshot, pool, probe)?;
            let after_score = mia_score(&coalition_update(snapshot, pool, &data, &after)?, snapshot, pool, probe)?;
            let flipped = before_score > thr && after_score <= thr;
            let outsiders: Vec<usize> = all.iter().copied().filter(|p| !group.contains(p)).collect();
            let guess = if flipped || rng.gen_bool(0.5) {
                group[rng.gen_range(0..group.len())]
            } else {
                outsiders[rng.gen_range(0..outsiders.len())]
            };
            Ok(guess == owner)
        })
        .collect::<Result<_, _>>()?;
    let correct = outcomes.iter().filter(|&&c| c).count();
    Ok(AttackResult::new(
        AttackKind::Differentiation,
        correct,
        outcomes.len(),
        format!(
            "partners={} group={} churn={}",
            cfg.partners, cfg.group_size, cfg.churn
        ),
    ))
}
