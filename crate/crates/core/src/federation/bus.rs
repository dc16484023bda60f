//! In-process message bus. Every message travels as bytes, is checked
//! against the permission table before delivery and is appended to a
//! length-prefixed transcript.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{OrgId, AGGREGATOR};
use crate::secagg::{MaskedVector, PublicTotals};

/// Asset classes and who may see them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AssetKind {
    Algorithm,
    Metric,
    Model,
    ModelMetadata,
    TestScore,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Visibility {
    Public,
    Private,
    AggregatorOnly,
}

impl AssetKind {
    pub fn visibility(self) -> Visibility {
        match self {
            AssetKind::Algorithm | AssetKind::Metric | AssetKind::TestScore => Visibility::Public,
            AssetKind::Model => Visibility::Private,
            AssetKind::ModelMetadata => Visibility::AggregatorOnly,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum MessageKind {
    /// A partner's batch size and label count for the round.
    Counts = 1,
    /// Round totals broadcast by the aggregator.
    Totals = 2,
    MaskedTrunk = 3,
    MaskedCatalogue = 4,
    AggregateTrunk = 5,
    AggregateCatalogue = 6,
    TestScore = 7,
    Algorithm = 8,
    MetricDefinition = 9,
    Abort = 10,
    /// Trunk plus head weights.
    FullModel = 11,
    HeadWeights = 12,
    /// Rows of a partner's X or Y.
    DataRows = 13,
}

impl MessageKind {
    pub fn from_u8(v: u8) -> Option<Self> {
        use MessageKind::*;
        [
            Counts,
            Totals,
            MaskedTrunk,
            MaskedCatalogue,
            AggregateTrunk,
            AggregateCatalogue,
            TestScore,
            Algorithm,
            MetricDefinition,
            Abort,
            FullModel,
            HeadWeights,
            DataRows,
        ]
        .into_iter()
        .find(|k| *k as u8 == v)
    }

    /// Asset class of the payload; `None` for raw data, which has no
    /// permitted route at all.
    pub fn asset(self) -> Option<AssetKind> {
        use MessageKind::*;
        match self {
            Counts | Totals | MaskedTrunk | MaskedCatalogue | AggregateTrunk | AggregateCatalogue | Abort => {
                Some(AssetKind::ModelMetadata)
            }
            TestScore => Some(AssetKind::TestScore),
            Algorithm => Some(AssetKind::Algorithm),
            MetricDefinition => Some(AssetKind::Metric),
            FullModel | HeadWeights => Some(AssetKind::Model),
            DataRows => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Envelope {
    pub round: u64,
    pub from: OrgId,
    pub to: OrgId,
    pub kind: MessageKind,
    pub payload: Vec<u8>,
}

impl Envelope {
    /// `round u64, from u32, to u32, kind u8, len u64, payload`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(25 + self.payload.len());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.from.to_le_bytes());
        out.extend_from_slice(&self.to.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Option<Self> {
        if b.len() < 25 {
            return None;
        }
        let len = u64::from_le_bytes(b[17..25].try_into().ok()?) as usize;
        if b.len() != 25usize.checked_add(len)? {
            return None;
        }
        Some(Self {
            round: u64::from_le_bytes(b[0..8].try_into().ok()?),
            from: u32::from_le_bytes(b[8..12].try_into().ok()?),
            to: u32::from_le_bytes(b[12..16].try_into().ok()?),
            kind: MessageKind::from_u8(b[16])?,
            payload: b[25..].to_vec(),
        })
    }
}

/// Per-partner round counts, sent in clear.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountsPayload {
    pub n_samples: u64,
    pub nnz: u64,
    /// Set on the catalogue channel's counts.
    pub catalogue: bool,
}

/// Round totals broadcast by the aggregator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TotalsPayload {
    pub totals: PublicTotals,
    pub catalogue: bool,
}

/// A published test score. Scores must carry a pseudonym only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorePayload {
    pub anon_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub org: Option<OrgId>,
    pub round: u32,
    pub task: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermissionViolation {
    pub round: u64,
    pub from: OrgId,
    pub to: OrgId,
    pub kind: MessageKind,
    pub reason: String,
}

impl std::fmt::Display for PermissionViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:?} from {} to {} in round {}: {}",
            self.kind,
            org_label(self.from),
            org_label(self.to),
            self.round,
            self.reason
        )
    }
}

fn org_label(o: OrgId) -> String {
    if o == AGGREGATOR {
        "aggregator".into()
    } else {
        format!("partner {o}")
    }
}

/// Who is on the network and who belongs to the catalogue group.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Membership {
    pub partners: BTreeSet<OrgId>,
    pub catalogue: BTreeSet<OrgId>,
}

/// Checks one envelope against the permission table and its payload schema.
pub fn check_permission(env: &Envelope, members: &Membership) -> Result<(), String> {
    let known = |o: OrgId| o == AGGREGATOR || members.partners.contains(&o);
    if !known(env.from) || !known(env.to) {
        return Err("unknown organization".into());
    }
    if env.from == env.to {
        return Err("sender and receiver are the same organization".into());
    }
    let asset = env
        .kind
        .asset()
        .ok_or_else(|| "raw data rows never leave their organization".to_string())?;
    match asset.visibility() {
        Visibility::Private => return Err("models stay with their owner".into()),
        Visibility::AggregatorOnly => {
            if (env.from == AGGREGATOR) == (env.to == AGGREGATOR) {
                return Err("model metadata travels only between a partner and the aggregator".into());
            }
        }
        Visibility::Public => {}
    }
    let partner = if env.from == AGGREGATOR { env.to } else { env.from };
    match env.kind {
        MessageKind::Counts | MessageKind::Totals => {
            let catalogue = if env.kind == MessageKind::Counts {
                serde_json::from_slice::<CountsPayload>(&env.payload).map(|c| c.catalogue)
            } else {
                serde_json::from_slice::<TotalsPayload>(&env.payload).map(|t| t.catalogue)
            }
            .map_err(|_| "malformed counts".to_string())?;
            if (env.kind == MessageKind::Counts) != (env.to == AGGREGATOR) {
                return Err("counts go to the aggregator, totals come from it".into());
            }
            if catalogue && !members.catalogue.contains(&partner) {
                return Err("catalogue traffic with a non-member".into());
            }
        }
        MessageKind::MaskedTrunk | MessageKind::MaskedCatalogue => {
            let m = MaskedVector::from_bytes(&env.payload).map_err(|e| e.to_string())?;
            if env.to != AGGREGATOR || m.sender != env.from || m.round != env.round {
                return Err("masked update must go from its sender to the aggregator".into());
            }
            if env.kind == MessageKind::MaskedCatalogue && !members.catalogue.contains(&partner) {
                return Err("catalogue traffic with a non-member".into());
            }
        }
        MessageKind::AggregateTrunk | MessageKind::AggregateCatalogue => {
            MaskedVector::from_bytes(&env.payload).map_err(|e| e.to_string())?;
            if env.from != AGGREGATOR {
                return Err("only the aggregator emits aggregates".into());
            }
            if env.kind == MessageKind::AggregateCatalogue && !members.catalogue.contains(&partner) {
                return Err("catalogue traffic with a non-member".into());
            }
        }
        MessageKind::TestScore => {
            let s: ScorePayload =
                serde_json::from_slice(&env.payload).map_err(|_| "malformed test score".to_string())?;
            if s.org.is_some() {
                return Err("test scores are published without organization labels".into());
            }
        }
        MessageKind::Abort => {
            if !env.payload.is_empty() || env.from != AGGREGATOR {
                return Err("abort notices come from the aggregator and carry nothing".into());
            }
        }
        MessageKind::Algorithm | MessageKind::MetricDefinition => {}
        MessageKind::FullModel | MessageKind::HeadWeights | MessageKind::DataRows => unreachable!(),
    }
    Ok(())
}

/// The bus: permission gate, inboxes and transcript.
#[derive(Debug, Default)]
pub struct Bus {
    members: Membership,
    inboxes: BTreeMap<OrgId, Vec<Envelope>>,
    transcript: Vec<u8>,
    violations: Vec<PermissionViolation>,
    delivered: usize,
}

impl Bus {
    pub fn new(members: Membership) -> Self {
        Self {
            members,
            ..Self::default()
        }
    }

    pub fn members(&self) -> &Membership {
        &self.members
    }

    pub fn set_members(&mut self, members: Membership) {
        self.members = members;
    }

    /// Delivers `env` if the permission table allows it; otherwise records
    /// the violation and drops the message.
    pub fn send(&mut self, env: Envelope) -> Result<(), PermissionViolation> {
        if let Err(reason) = check_permission(&env, &self.members) {
            let v = PermissionViolation {
                round: env.round,
                from: env.from,
                to: env.to,
                kind: env.kind,
                reason,
            };
            self.violations.push(v.clone());
            return Err(v);
        }
        let bytes = env.to_bytes();
        self.transcript.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
        self.transcript.extend_from_slice(&bytes);
        self.inboxes.entry(env.to).or_default().push(env);
        self.delivered += 1;
        Ok(())
    }

    /// Takes every pending message for `org` of one kind, ordered by
    /// `(round, sender)`.
    pub fn drain(&mut self, org: OrgId, kind: MessageKind) -> Vec<Envelope> {
        let inbox = self.inboxes.entry(org).or_default();
        let (mut out, keep): (Vec<_>, Vec<_>) = std::mem::take(inbox).into_iter().partition(|e| e.kind == kind);
        *inbox = keep;
        out.sort_by_key(|e| (e.round, e.from));
        out
    }

    /// Drops all undelivered messages.
    pub fn clear_inboxes(&mut self) {
        self.inboxes.clear();
    }

    pub fn transcript(&self) -> &[u8] {
        &self.transcript
    }

    pub fn transcript_len(&self) -> usize {
        self.transcript.len()
    }

    /// Cuts the transcript back to an earlier length.
    pub fn truncate_transcript(&mut self, len: usize) {
        self.transcript.truncate(len);
    }

    pub fn violations(&self) -> &[PermissionViolation] {
        &self.violations
    }

    pub fn delivered(&self) -> usize {
        self.delivered
    }
}

/// Splits a transcript back into envelopes.
pub fn parse_transcript(bytes: &[u8]) -> Option<Vec<Envelope>> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let len = u32::from_le_bytes(bytes.get(pos..pos + 4)?.try_into().ok()?) as usize;
        pos += 4;
        out.push(Envelope::from_bytes(bytes.get(pos..pos + len)?)?);
        pos += len;
    }
    Some(out)
}
