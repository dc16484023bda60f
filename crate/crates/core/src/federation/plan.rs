//! Compute plans: a DAG of train, aggregate and test tasks pinned to
//! organizations.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{OrgId, AGGREGATOR};
use crate::secagg::PartnerId;

/// Operational phase. Each one trains on a different share of the folds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Phase {
    /// Tuning: train on folds 0–2, validate on fold 3, fold 4 held out.
    Tune,
    /// Retrain on folds 0–3, test on fold 4.
    Retrain,
    /// Train on everything; nothing left to evaluate on.
    Final,
}

pub const N_FOLDS: u8 = 5;

impl Phase {
    pub fn number(self) -> u8 {
        match self {
            Phase::Tune => 1,
            Phase::Retrain => 2,
            Phase::Final => 3,
        }
    }

    pub fn train_folds(self) -> Vec<u8> {
        match self {
            Phase::Tune => vec![0, 1, 2],
            Phase::Retrain => vec![0, 1, 2, 3],
            Phase::Final => (0..N_FOLDS).collect(),
        }
    }

    /// Fold scored by test tasks, if any.
    pub fn eval_fold(self) -> Option<u8> {
        match self {
            Phase::Tune => Some(3),
            Phase::Retrain => Some(4),
            Phase::Final => None,
        }
    }
}

impl TryFrom<u8> for Phase {
    type Error = PlanError;

    fn try_from(n: u8) -> Result<Self, PlanError> {
        match n {
            1 => Ok(Phase::Tune),
            2 => Ok(Phase::Retrain),
            3 => Ok(Phase::Final),
            other => Err(PlanError::BadPhase(other)),
        }
    }
}

impl From<Phase> for u8 {
    fn from(p: Phase) -> u8 {
        p.number()
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    Train,
    Aggregate,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskNode {
    pub id: usize,
    pub kind: NodeKind,
    pub round: u32,
    pub org: OrgId,
}

/// When test tasks run and on which partners.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestSchedule {
    /// Test after every `every_rounds` rounds and after the last round;
    /// 0 tests after the last round only.
    pub every_rounds: u32,
    /// Partners that evaluate; empty means all.
    pub partners: Vec<PartnerId>,
}

impl TestSchedule {
    pub fn final_only() -> Self {
        Self {
            every_rounds: 0,
            partners: Vec::new(),
        }
    }

    fn fires(&self, round: u32, n_rounds: u32) -> bool {
        round + 1 == n_rounds || (self.every_rounds > 0 && (round + 1) % self.every_rounds == 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComputePlan {
    pub phase: Phase,
    pub partners: Vec<PartnerId>,
    pub epochs: u32,
    pub batches_per_epoch: u32,
    pub nodes: Vec<TaskNode>,
    /// `(parent, child)` pairs.
    pub edges: Vec<(usize, usize)>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PlanError {
    #[error("plan has zero rounds")]
    ZeroRounds,
    #[error("plan has no partners")]
    NoPartners,
    #[error("phase must be 1, 2 or 3, got {0}")]
    BadPhase(u8),
    #[error("edge relation contains a cycle")]
    Cycle,
    #[error("edge references unknown node {0}")]
    UnknownNode(usize),
    #[error("node {node} is assigned to the wrong organization")]
    Assignment { node: usize },
    #[error("test schedule names unknown partner {0}")]
    UnknownPartner(PartnerId),
}

/// Per round: one train task per partner feeding one aggregate task, whose
/// result every partner applies before its next train task. Test tasks hang
/// off the aggregate task of the rounds the schedule selects.
pub fn build_plan(
    partners: &[PartnerId],
    epochs: u32,
    batches_per_epoch: u32,
    phase: Phase,
    tests: &TestSchedule,
) -> Result<ComputePlan, PlanError> {
    let n_rounds = epochs.checked_mul(batches_per_epoch).ok_or(PlanError::ZeroRounds)?;
    if n_rounds == 0 {
        return Err(PlanError::ZeroRounds);
    }
    let partners: Vec<PartnerId> = partners.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if partners.is_empty() {
        return Err(PlanError::NoPartners);
    }
    if let Some(&p) = tests.partners.iter().find(|p| !partners.contains(p)) {
        return Err(PlanError::UnknownPartner(p));
    }
    let testers: &[PartnerId] = if tests.partners.is_empty() {
        &partners
    } else {
        &tests.partners
    };
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    let mut push = |kind, round, org| {
        let id = nodes.len();
        nodes.push(TaskNode { id, kind, round, org });
        id
    };
    let mut prev_agg: Option<usize> = None;
    for round in 0..n_rounds {
        let trains: Vec<usize> = partners.iter().map(|&p| push(NodeKind::Train, round, p)).collect();
        let agg = push(NodeKind::Aggregate, round, AGGREGATOR);
        for &t in &trains {
            if let Some(a) = prev_agg {
                edges.push((a, t));
            }
            edges.push((t, agg));
        }
        if phase.eval_fold().is_some() && tests.fires(round, n_rounds) {
            for &p in testers {
                let t = push(NodeKind::Test, round, p);
                edges.push((agg, t));
            }
        }
        prev_agg = Some(agg);
    }
    let plan = ComputePlan {
        phase,
        partners,
        epochs,
        batches_per_epoch,
        nodes,
        edges,
    };
    plan.validate()?;
    Ok(plan)
}

impl ComputePlan {
    pub fn n_rounds(&self) -> u32 {
        self.epochs * self.batches_per_epoch
    }

    pub fn parents(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter(move |e| e.1 == node).map(|e| e.0)
    }

    /// Checks assignments and acyclicity; returns a topological order that
    /// breaks ties by lowest node id.
    pub fn validate(&self) -> Result<Vec<usize>, PlanError> {
        let n = self.nodes.len();
        for (i, node) in self.nodes.iter().enumerate() {
            let ok = node.id == i
                && match node.kind {
                    NodeKind::Aggregate => node.org == AGGREGATOR,
                    NodeKind::Train | NodeKind::Test => self.partners.contains(&node.org),
                };
            if !ok {
                return Err(PlanError::Assignment { node: i });
            }
        }
        let mut indegree = vec![0usize; n];
        let mut children = vec![Vec::new(); n];
        for &(a, b) in &self.edges {
            if a >= n {
                return Err(PlanError::UnknownNode(a));
            }
            if b >= n {
                return Err(PlanError::UnknownNode(b));
            }
            indegree[b] += 1;
            children[a].push(b);
        }
        let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(next) = ready.pop_first() {
            order.push(next);
            for &c in &children[next] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        if order.len() != n {
            return Err(PlanError::Cycle);
        }
        Ok(order)
    }
}
