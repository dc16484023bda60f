//! Group join/leave policy.

use serde::{Deserialize, Serialize};

use crate::secagg::PartnerId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChurnPolicy {
    /// Smallest group allowed to join or leave at once.
    pub min_group_size: usize,
}

impl Default for ChurnPolicy {
    fn default() -> Self {
        Self { min_group_size: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChurnKind {
    Join,
    Leave,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChurnEvent {
    pub kind: ChurnKind,
    pub partners: Vec<PartnerId>,
    pub at_phase_boundary: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChurnDecision {
    Accept,
    Reject(String),
}

impl ChurnDecision {
    pub fn accepted(&self) -> bool {
        matches!(self, ChurnDecision::Accept)
    }
}

/// Accepts a membership change only as a large enough group, and only
/// between phases.
pub fn enforce_churn(policy: &ChurnPolicy, event: &ChurnEvent) -> ChurnDecision {
    let mut ids = event.partners.clone();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != event.partners.len() {
        return ChurnDecision::Reject("duplicate partner in group".into());
    }
    if !event.at_phase_boundary {
        return ChurnDecision::Reject("membership changes only at phase boundaries".into());
    }
    if ids.is_empty() || ids.len() < policy.min_group_size {
        return ChurnDecision::Reject(format!(
            "group of {} is below the minimum of {}",
            ids.len(),
            policy.min_group_size.max(1)
        ));
    }
    ChurnDecision::Accept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(n: u32, boundary: bool) -> ChurnEvent {
        ChurnEvent {
            kind: ChurnKind::Leave,
            partners: (0..n).collect(),
            at_phase_boundary: boundary,
        }
    }

    #[test]
    fn policy_table() {
        let p = ChurnPolicy { min_group_size: 3 };
        assert!(!enforce_churn(&p, &ev(1, false)).accepted());
        assert!(!enforce_churn(&p, &ev(3, false)).accepted());
        assert!(!enforce_churn(&p, &ev(2, true)).accepted());
        assert!(enforce_churn(&p, &ev(3, true)).accepted());
        assert!(!enforce_churn(&ChurnPolicy::default(), &ev(0, true)).accepted());
    }
}
