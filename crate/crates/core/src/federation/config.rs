use serde::{Deserialize, Serialize};

use super::churn::ChurnPolicy;
use super::FederationError;
use crate::model::Nonlinearity;
use crate::secagg::{PartnerId, WeightingScheme};

/// Training and protocol settings shared by every partner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedConfig {
    pub weighting: WeightingScheme,
    /// Share of trunk coordinates aggregated per round, in `(0, 1]`.
    pub k_fraction: f64,
    pub epochs: u32,
    pub batches_per_epoch: u32,
    pub lr: f64,
    pub hidden: Vec<usize>,
    pub nonlinearity: Nonlinearity,
    pub churn: ChurnPolicy,
    /// Rounds between test tasks; 0 tests after the last round only.
    pub eval_every: u32,
    /// Per-fold label minimum for a task to be scored.
    pub eval_quorum: usize,
    pub faults: FaultPlan,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            weighting: WeightingScheme::DataProportional,
            k_fraction: 1.0,
            epochs: 20,
            batches_per_epoch: 4,
            lr: 2.0,
            hidden: vec![64],
            nonlinearity: Nonlinearity::Relu,
            churn: ChurnPolicy::default(),
            eval_every: 0,
            eval_quorum: 3,
            faults: FaultPlan::default(),
        }
    }
}

impl FedConfig {
    pub fn n_rounds(&self) -> u32 {
        self.epochs.saturating_mul(self.batches_per_epoch)
    }

    /// Field-level validation, run before any compute.
    pub fn validate(&self) -> Result<(), FederationError> {
        let bad = |field: &'static str, message: String| Err(FederationError::Config { field, message });
        if !(self.k_fraction > 0.0 && self.k_fraction <= 1.0) {
            return bad("k_fraction", format!("must be in (0, 1], got {}", self.k_fraction));
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        if self.batches_per_epoch == 0 {
            return bad("batches_per_epoch", "must be at least 1".into());
        }
        if self.n_rounds() >= 1 << 24 {
            return bad("epochs", "epochs × batches_per_epoch must stay below 2^24 rounds".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr", format!("must be a positive number, got {}", self.lr));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden", "needs at least one non-empty layer".into());
        }
        if self.churn.min_group_size == 0 {
            return bad("churn.min_group_size", "must be at least 1".into());
        }
        Ok(())
    }
}

/// Misbehaviour injected into a run, for protocol and permission tests.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultPlan {
    /// `(round, partner)` pairs whose masked submission never arrives.
    pub drop_submissions: Vec<(u32, PartnerId)>,
    pub forbidden: Vec<ForbiddenSend>,
}

/// A message a partner tries to put on the bus although it must not.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForbiddenSend {
    pub round: u32,
    pub partner: PartnerId,
    pub kind: ForbiddenKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForbiddenKind {
    /// Trunk and head to the aggregator.
    FullModel,
    /// Private head to the aggregator.
    HeadWeights,
    /// Feature rows of the current batch to the aggregator.
    DataRows,
    /// A test score carrying the sender's organization id.
    AttributedScore,
    /// A masked update sent straight to another partner.
    PeerUpdate,
}
