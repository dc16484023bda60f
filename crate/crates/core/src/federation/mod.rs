//! Simulated cross-silo federation: compute plans, the message bus with its
//! permission table, churn policy, the round state machine and phases.

pub mod bus;
pub mod churn;
pub mod config;
pub mod oracle;
pub mod plan;
pub mod state;

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

pub use bus::{check_permission, parse_transcript, AssetKind, Bus, Envelope, MessageKind, PermissionViolation, Visibility};
pub use churn::{enforce_churn, ChurnDecision, ChurnEvent, ChurnKind, ChurnPolicy};
pub use config::{FaultPlan, FedConfig, ForbiddenKind, ForbiddenSend};
pub use plan::{build_plan, ComputePlan, NodeKind, Phase, PlanError, TaskNode, TestSchedule, N_FOLDS};
pub use state::{anon_id, Federation, PartnerSetup, PartnerState, RoundReport};

use crate::datagen::{BundleError, DatasetBundle};
use crate::eval::EvalError;
use crate::model::{ModelError, ModelParams};
use crate::primitives::{CsrError, Seed};
use crate::secagg::{PartnerId, SecAggError};

pub type OrgId = u32;

/// Organization id of the aggregator.
pub const AGGREGATOR: OrgId = u32::MAX;

#[derive(Debug, thiserror::Error)]
pub enum FederationError {
    #[error("invalid config field `{field}`: {message}")]
    Config { field: &'static str, message: String },
    #[error("round {round} aborted: missing partner ({got} of {expected} submissions)")]
    MissingPartner { round: u32, expected: usize, got: usize },
    #[error("permission violation: {0}")]
    Permission(PermissionViolation),
    #[error("unknown partner {0}")]
    UnknownPartner(PartnerId),
    #[error("protocol error: {0}")]
    Protocol(&'static str),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    SecAgg(#[from] SecAggError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Csr(#[from] CsrError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One published metric: `(round, partner_anon_id, task_idx, metric_name, value)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub round: u32,
    pub partner_anon_id: String,
    /// Column index, or `all` for whole-model metrics.
    pub task_idx: String,
    pub metric_name: String,
    pub value: f64,
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricRow], w: W) -> Result<(), FederationError> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(["round", "partner_anon_id", "task_idx", "metric_name", "value"])?;
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: std::io::Read>(r: R) -> Result<Vec<MetricRow>, FederationError> {
    let mut rd = csv::Reader::from_reader(r);
    Ok(rd.deserialize().collect::<Result<_, _>>()?)
}

/// Everything a phase run produces.
#[derive(Clone, Debug)]
pub struct PhaseOutput {
    pub phase: Phase,
    pub models: BTreeMap<PartnerId, ModelParams>,
    /// Published test scores; empty for the final phase.
    pub metrics: Vec<MetricRow>,
    pub transcript: Vec<u8>,
    pub train_rows: BTreeMap<PartnerId, usize>,
    pub rounds: Vec<RoundReport>,
    pub executed: Vec<usize>,
}

/// Trains one phase from scratch. Partner `i` owns `bundles[i]`.
pub fn run_phase(
    cfg: &FedConfig,
    master: &Seed,
    bundles: &[DatasetBundle],
    phase: Phase,
    tests: &TestSchedule,
) -> Result<PhaseOutput, FederationError> {
    if let Some(i) = bundles.iter().position(|b| b.folds.iter().any(|&f| f >= N_FOLDS)) {
        return Err(FederationError::Config {
            field: "partners",
            message: format!("partner {i} uses folds beyond the {N_FOLDS} expected"),
        });
    }
    let ids: Vec<PartnerId> = (0..bundles.len() as PartnerId).collect();
    let plan = build_plan(&ids, cfg.epochs, cfg.batches_per_epoch, phase, tests)?;
    let setups: Vec<PartnerSetup> = bundles
        .iter()
        .zip(&ids)
        .map(|(b, &id)| PartnerSetup {
            id,
            bundle: b.clone(),
            train_rows: b.rows_in_folds(&phase.train_folds()),
        })
        .collect();
    let train_rows = setups.iter().map(|s| (s.id, s.train_rows.len())).collect();
    let mut fed = Federation::new(cfg.clone(), *master, setups)?;
    let executed = fed.execute(&plan, phase.eval_fold())?;
    Ok(PhaseOutput {
        phase,
        models: fed.partners().map(|p| (p.id, p.params.clone())).collect(),
        metrics: fed.public_scores().to_vec(),
        transcript: fed.bus().transcript().to_vec(),
        train_rows,
        rounds: fed.history().to_vec(),
        executed,
    })
}
