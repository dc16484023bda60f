//! The round state machine.
//!
//! A round runs in two halves. `train` has each partner draw its next
//! mini-batch, compute gradients and report its counts. `aggregate` has the
//! aggregator broadcast the totals, collects masked trunk (and catalogue)
//! updates, sums them and broadcasts the sum; partners then unmask and apply
//! it together with their local head step. Nothing is committed unless the
//! whole round succeeds.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bus::{
    Bus, CountsPayload, Envelope, Membership, MessageKind, ScorePayload, TotalsPayload,
};
use super::config::{FedConfig, ForbiddenKind};
use super::plan::{ComputePlan, NodeKind};
use super::{FederationError, MetricRow, OrgId, AGGREGATOR};
use crate::datagen::DatasetBundle;
use crate::eval::evaluate;
use crate::model::{backward, forward, loss, Architecture, GradientUpdate, ModelParams};
use crate::primitives::{derive_stream, FixedPointCodec, Purpose, Seed, StreamId};
use crate::secagg::{
    aggregate, apply_weight, mask, provision, scatter_update, select_subset, unmask, Channel, ChannelKeys,
    MaskedVector, PartnerId, PartnerKeys, PublicTotals, ServerKeyView,
};

use super::churn::{enforce_churn, ChurnDecision, ChurnEvent, ChurnKind};

/// A partner's data and the rows it trains on.
#[derive(Clone, Debug)]
pub struct PartnerSetup {
    pub id: PartnerId,
    pub bundle: DatasetBundle,
    pub train_rows: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct PartnerState {
    pub id: PartnerId,
    pub bundle: DatasetBundle,
    pub train_rows: Vec<usize>,
    pub params: ModelParams,
    keys: PartnerKeys,
    batch_seed: Seed,
    cursor: u64,
}

impl PartnerState {
    pub fn keys(&self) -> &PartnerKeys {
        &self.keys
    }

    /// Number of mini-batches consumed so far.
    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    /// Rows of the mini-batch drawn at `cursor`: the training rows are
    /// shuffled once per epoch and cut into `batches_per_epoch` slices.
    pub fn batch_rows(&self, cursor: u64, batches_per_epoch: u32) -> Vec<usize> {
        let b = batches_per_epoch as u64;
        let (epoch, slot) = (cursor / b, (cursor % b) as usize);
        let mut rows = self.train_rows.clone();
        let mut rng = derive_stream(&self.batch_seed, StreamId::item(Purpose::Batch, epoch));
        rows.shuffle(&mut rng);
        let n = rows.len();
        let (lo, hi) = (slot * n / b as usize, (slot + 1) * n / b as usize);
        let mut batch = rows[lo..hi].to_vec();
        batch.sort_unstable();
        batch
    }
}

/// What one partner computed in the first half of a round.
#[derive(Clone, Debug)]
struct Staged {
    grad: GradientUpdate,
    loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u32,
    pub cohort: Vec<PartnerId>,
    /// Trunk coordinates aggregated this round.
    pub coords: Vec<u64>,
    pub train_loss: BTreeMap<PartnerId, f64>,
    pub totals: PublicTotals,
}

pub struct Federation {
    cfg: FedConfig,
    master: Seed,
    codec: FixedPointCodec,
    arch: Architecture,
    partners: BTreeMap<PartnerId, PartnerState>,
    server: ServerKeyView,
    bus: Bus,
    round: u32,
    key_epoch: u32,
    rounds_in_phase: u32,
    staged: BTreeMap<PartnerId, Staged>,
    round_mark: Option<usize>,
    board: Vec<MetricRow>,
    history: Vec<RoundReport>,
}

fn setup_seed(master: &Seed) -> Seed {
    master.child(Purpose::KeyDerivation, 1)
}

/// Public pseudonym of an organization for published scores.
pub fn anon_id(master: &Seed, org: OrgId) -> String {
    let s = master.child(Purpose::Anonymize, org as u64);
    format!("anon-{:02x}{:02x}{:02x}{:02x}", s.0[0], s.0[1], s.0[2], s.0[3])
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("plain data serializes")
}

impl Federation {
    pub fn new(cfg: FedConfig, master: Seed, setups: Vec<PartnerSetup>) -> Result<Self, FederationError> {
        cfg.validate()?;
        let first = setups
            .first()
            .ok_or(FederationError::Config {
                field: "partners",
                message: "need at least one partner".into(),
            })?;
        let arch = Architecture {
            feature_dim: first.bundle.feature_dim(),
            hidden: cfg.hidden.clone(),
            n_head: 0,
            n_catalogue: 0,
            nonlinearity: cfg.nonlinearity,
        };
        let mut fed = Self {
            codec: FixedPointCodec::default(),
            arch,
            partners: BTreeMap::new(),
            server: ServerKeyView {
                epoch: 0,
                cohort: Vec::new(),
                catalogue_cohort: Vec::new(),
            },
            bus: Bus::default(),
            round: 0,
            key_epoch: 0,
            rounds_in_phase: 0,
            staged: BTreeMap::new(),
            round_mark: None,
            board: Vec::new(),
            history: Vec::new(),
            cfg,
            master,
        };
        let mut states = Vec::new();
        for s in setups {
            states.push(fed.init_partner(s, None)?);
        }
        for st in states {
            if fed.partners.insert(st.id, st).is_some() {
                return Err(FederationError::Config {
                    field: "partners",
                    message: "duplicate partner id".into(),
                });
            }
        }
        fed.check_catalogue_shapes()?;
        fed.rekey(0);
        Ok(fed)
    }

    /// Builds a partner's state. Joiners take the current trunk (and
    /// catalogue head) from `template`.
    fn init_partner(&self, s: PartnerSetup, template: Option<&ModelParams>) -> Result<PartnerState, FederationError> {
        if s.bundle.feature_dim() != self.arch.feature_dim {
            return Err(FederationError::Config {
                field: "partners",
                message: format!(
                    "partner {} has feature dimension {}, expected {}",
                    s.id,
                    s.bundle.feature_dim(),
                    self.arch.feature_dim
                ),
            });
        }
        if s.id >= u16::MAX as u32 {
            return Err(FederationError::Config {
                field: "partners",
                message: "partner ids must be below 65535".into(),
            });
        }
        if (s.train_rows.len() as u64) < self.cfg.batches_per_epoch as u64 {
            return Err(FederationError::Config {
                field: "batches_per_epoch",
                message: format!(
                    "partner {} has {} training rows, fewer than {} batches",
                    s.id,
                    s.train_rows.len(),
                    self.cfg.batches_per_epoch
                ),
            });
        }
        if let Some(&r) = s.train_rows.iter().find(|&&r| r >= s.bundle.n_rows()) {
            return Err(FederationError::Config {
                field: "partners",
                message: format!("training row {r} out of range"),
            });
        }
        let arch = Architecture {
            n_head: s.bundle.n_head_tasks(),
            n_catalogue: s.bundle.n_catalogue_tasks(),
            ..self.arch.clone()
        };
        let cat_seed = self.master.child(Purpose::CatalogueInit, 0);
        let mut params = ModelParams::init(
            &arch,
            &self.master.child(Purpose::TrunkInit, 0),
            &self.master.child(Purpose::HeadInit, s.id as u64),
            Some(&cat_seed),
        )?;
        if let Some(t) = template {
            params.trunk = t.trunk.clone();
            if params.catalogue_head.is_some() && t.catalogue_head.is_some() {
                params.catalogue_head = t.catalogue_head.clone();
            }
        }
        Ok(PartnerState {
            id: s.id,
            bundle: s.bundle,
            train_rows: s.train_rows,
            params,
            keys: provision(&setup_seed(&self.master), 0, &[s.id], &[]).0.remove(&s.id).expect("own keys"),
            batch_seed: self.master.child(Purpose::Batch, s.id as u64),
            cursor: 0,
        })
    }

    fn check_catalogue_shapes(&self) -> Result<(), FederationError> {
        let mut sizes = self.partners.values().map(|p| p.params.n_catalogue()).filter(|&n| n > 0);
        if let Some(n) = sizes.next() {
            if sizes.any(|m| m != n) {
                return Err(FederationError::Config {
                    field: "partners",
                    message: "catalogue members disagree on the catalogue task count".into(),
                });
            }
        }
        Ok(())
    }

    /// Deals fresh keys for the current membership.
    fn rekey(&mut self, epoch: u32) {
        let cohort: Vec<PartnerId> = self.partners.keys().copied().collect();
        let cat: Vec<PartnerId> = self
            .partners
            .values()
            .filter(|p| p.params.catalogue_head.is_some())
            .map(|p| p.id)
            .collect();
        let (mut keys, server) = provision(&setup_seed(&self.master), epoch, &cohort, &cat);
        for (id, p) in self.partners.iter_mut() {
            p.keys = keys.remove(id).expect("every member gets keys");
        }
        self.bus.set_members(Membership {
            partners: cohort.iter().copied().collect(),
            catalogue: cat.iter().copied().collect(),
        });
        self.server = server;
        self.key_epoch = epoch;
    }

    pub fn config(&self) -> &FedConfig {
        &self.cfg
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn cohort(&self) -> Vec<PartnerId> {
        self.partners.keys().copied().collect()
    }

    pub fn partner(&self, id: PartnerId) -> Option<&PartnerState> {
        self.partners.get(&id)
    }

    pub fn partners(&self) -> impl Iterator<Item = &PartnerState> {
        self.partners.values()
    }

    pub fn server_view(&self) -> &ServerKeyView {
        &self.server
    }

    pub fn bus(&self) -> &Bus {
        &self.bus
    }

    pub fn history(&self) -> &[RoundReport] {
        &self.history
    }

    /// Scores published so far, as the public board shows them.
    pub fn public_scores(&self) -> &[MetricRow] {
        &self.board
    }

    pub fn codec(&self) -> &FixedPointCodec {
        &self.codec
    }

    /// Puts an arbitrary message on the bus on a partner's behalf.
    pub fn send(&mut self, env: Envelope) -> Result<(), FederationError> {
        self.bus.send(env).map_err(FederationError::Permission)
    }

    pub fn begin_phase(&mut self) {
        self.rounds_in_phase = 0;
    }

    /// Applies a join or leave if the churn policy accepts it. Joiners must
    /// be listed in `joiners`; the keys of every member are re-dealt.
    pub fn request_churn(
        &mut self,
        event: &ChurnEvent,
        joiners: Vec<PartnerSetup>,
    ) -> Result<ChurnDecision, FederationError> {
        let mut event = event.clone();
        event.at_phase_boundary = event.at_phase_boundary && self.rounds_in_phase == 0 && self.staged.is_empty();
        let decision = enforce_churn(&self.cfg.churn, &event);
        if !decision.accepted() {
            return Ok(decision);
        }
        match event.kind {
            ChurnKind::Leave => {
                if let Some(&p) = event.partners.iter().find(|p| !self.partners.contains_key(p)) {
                    return Ok(ChurnDecision::Reject(format!("partner {p} is not a member")));
                }
                if event.partners.len() >= self.partners.len() {
                    return Ok(ChurnDecision::Reject("at least one partner must remain".into()));
                }
                for p in &event.partners {
                    self.partners.remove(p);
                }
            }
            ChurnKind::Join => {
                let mut ids: Vec<PartnerId> = joiners.iter().map(|j| j.id).collect();
                ids.sort_unstable();
                let mut want = event.partners.clone();
                want.sort_unstable();
                if ids != want {
                    return Ok(ChurnDecision::Reject("joiner data does not match the event".into()));
                }
                if let Some(p) = ids.iter().find(|p| self.partners.contains_key(p)) {
                    return Ok(ChurnDecision::Reject(format!("partner {p} is already a member")));
                }
                let template = self.partners.values().next().expect("cohort is never empty").params.clone();
                let cat_template = self
                    .partners
                    .values()
                    .find(|p| p.params.catalogue_head.is_some())
                    .map(|p| p.params.clone());
                let mut fresh = Vec::new();
                for j in joiners {
                    let t = match &cat_template {
                        Some(c) if j.bundle.n_catalogue_tasks() > 0 => ModelParams {
                            trunk: template.trunk.clone(),
                            ..c.clone()
                        },
                        _ => template.clone(),
                    };
                    fresh.push(self.init_partner(j, Some(&t))?);
                }
                for st in fresh {
                    self.partners.insert(st.id, st);
                }
                self.check_catalogue_shapes()?;
            }
        }
        self.rekey(self.key_epoch + 1);
        Ok(ChurnDecision::Accept)
    }

    fn mark_round(&mut self) {
        if self.round_mark.is_none() {
            self.round_mark = Some(self.bus.transcript_len());
        }
    }

    /// First half of a round for the listed partners.
    pub fn train(&mut self, ids: &[PartnerId]) -> Result<(), FederationError> {
        self.mark_round();
        let round = self.round;
        let b = self.cfg.batches_per_epoch;
        for id in ids {
            if !self.partners.contains_key(id) {
                return Err(FederationError::UnknownPartner(*id));
            }
        }
        let results: Vec<(PartnerId, Result<Staged, FederationError>)> = ids
            .par_iter()
            .map(|id| {
                let p = &self.partners[id];
                let run = || -> Result<Staged, FederationError> {
                    let rows = p.batch_rows(p.cursor, b);
                    let x = p.bundle.x.select_rows(&rows)?;
                    let y = p.bundle.labels.select_rows(&rows)?;
                    let (l, grad) = backward(&p.params, &x, &y, &p.bundle.tasks)?;
                    Ok(Staged { grad, loss: l.total })
                };
                (*id, run())
            })
            .collect();
        for (id, r) in results {
            let staged = r?;
            self.inject_forbidden(round, id)?;
            let counts = CountsPayload {
                n_samples: staged.grad.n_samples as u64,
                nnz: staged.grad.nnz as u64,
                catalogue: false,
            };
            self.send_counts(id, counts)?;
            if staged.grad.catalogue_grad.is_some() {
                self.send_counts(
                    id,
                    CountsPayload {
                        catalogue: true,
                        ..counts
                    },
                )?;
            }
            self.staged.insert(id, staged);
        }
        Ok(())
    }

    fn send_counts(&mut self, id: PartnerId, c: CountsPayload) -> Result<(), FederationError> {
        self.send(Envelope {
            round: self.round as u64,
            from: id,
            to: AGGREGATOR,
            kind: MessageKind::Counts,
            payload: json(&c),
        })
    }

    fn inject_forbidden(&mut self, round: u32, id: PartnerId) -> Result<(), FederationError> {
        let faults: Vec<ForbiddenKind> = self
            .cfg
            .faults
            .forbidden
            .iter()
            .filter(|f| f.round == round && f.partner == id)
            .map(|f| f.kind)
            .collect();
        for kind in faults {
            let p = &self.partners[&id];
            let (to, kind, payload) = match kind {
                ForbiddenKind::FullModel => {
                    let mut b = p.params.trunk_bytes();
                    b.extend(p.params.head_bytes());
                    (AGGREGATOR, MessageKind::FullModel, b)
                }
                ForbiddenKind::HeadWeights => (AGGREGATOR, MessageKind::HeadWeights, p.params.head_bytes()),
                ForbiddenKind::DataRows => {
                    let rows = p.batch_rows(p.cursor, self.cfg.batches_per_epoch);
                    (AGGREGATOR, MessageKind::DataRows, p.bundle.x.select_rows(&rows)?.to_bytes())
                }
                ForbiddenKind::AttributedScore => {
                    let s = ScorePayload {
                        anon_id: anon_id(&self.master, id),
                        org: Some(id),
                        round,
                        task: "all".into(),
                        metric: "loss".into(),
                        value: 0.0,
                    };
                    (AGGREGATOR, MessageKind::TestScore, json(&s))
                }
                ForbiddenKind::PeerUpdate => {
                    let peer = self.partners.keys().copied().find(|&q| q != id).unwrap_or(id);
                    let m = MaskedVector {
                        round: round as u64,
                        sender: id,
                        coords: vec![0],
                        values: vec![0],
                        weight_tag: 0,
                    };
                    (peer, MessageKind::MaskedTrunk, m.to_bytes())
                }
            };
            self.send(Envelope {
                round: round as u64,
                from: id,
                to,
                kind,
                payload,
            })?;
        }
        Ok(())
    }

    fn totals_from(envs: &[Envelope]) -> Result<PublicTotals, FederationError> {
        let mut t = PublicTotals {
            n_partners: 0,
            total_samples: 0,
            total_nnz: 0,
        };
        for e in envs {
            let c: CountsPayload = serde_json::from_slice(&e.payload).map_err(|_| FederationError::Protocol("bad counts"))?;
            t.n_partners += 1;
            t.total_samples += c.n_samples;
            t.total_nnz += c.nnz;
        }
        Ok(t)
    }

    fn broadcast(&mut self, to: &[PartnerId], kind: MessageKind, payload: &[u8]) -> Result<(), FederationError> {
        for &p in to {
            self.send(Envelope {
                round: self.round as u64,
                from: AGGREGATOR,
                to: p,
                kind,
                payload: payload.to_vec(),
            })?;
        }
        Ok(())
    }

    fn mask_channel(
        &self,
        id: PartnerId,
        keys: &ChannelKeys,
        update: &[f64],
        coords: &[u64],
    ) -> Result<MaskedVector, FederationError> {
        Ok(mask(update, keys, id, self.round, coords, &self.codec, self.cfg.weighting)?)
    }

    /// Totals a partner received this round: trunk channel, then catalogue.
    fn received_totals(&mut self, id: PartnerId) -> (Option<PublicTotals>, Option<PublicTotals>) {
        let msgs: Vec<TotalsPayload> = self
            .bus
            .drain(id, MessageKind::Totals)
            .iter()
            .filter_map(|e| serde_json::from_slice(&e.payload).ok())
            .collect();
        let pick = |cat: bool| msgs.iter().find(|t| t.catalogue == cat).map(|t| t.totals);
        (pick(false), pick(true))
    }

    /// Second half of a round: weighting, masking, aggregation, unmasking
    /// and the commit of every partner's step.
    pub fn aggregate(&mut self) -> Result<RoundReport, FederationError> {
        self.mark_round();
        match self.aggregate_inner() {
            Ok(r) => {
                self.round_mark = None;
                Ok(r)
            }
            Err(e) => {
                self.abort();
                Err(e)
            }
        }
    }

    fn aggregate_inner(&mut self) -> Result<RoundReport, FederationError> {
        let round = self.round;
        let cohort = self.server.cohort.clone();
        let cat_cohort = self.server.catalogue_cohort.clone();

        // aggregator: counts in, totals out
        let counts = self.bus.drain(AGGREGATOR, MessageKind::Counts);
        let (cat_counts, trunk_counts): (Vec<_>, Vec<_>) = counts.into_iter().partition(|e| {
            serde_json::from_slice::<CountsPayload>(&e.payload).is_ok_and(|c| c.catalogue)
        });
        let totals = Self::totals_from(&trunk_counts)?;
        let cat_totals = Self::totals_from(&cat_counts)?;
        self.broadcast(&cohort, MessageKind::Totals, &json(&TotalsPayload { totals, catalogue: false }))?;
        if !cat_cohort.is_empty() {
            self.broadcast(
                &cat_cohort,
                MessageKind::Totals,
                &json(&TotalsPayload {
                    totals: cat_totals,
                    catalogue: true,
                }),
            )?;
        }

        // partners: weight and mask
        let staged_ids: Vec<PartnerId> = self.staged.keys().copied().collect();
        let mut jobs = Vec::new();
        for &id in &staged_ids {
            let (t, ct) = self.received_totals(id);
            let t = t.ok_or(FederationError::Protocol("totals not received"))?;
            if self.staged[&id].grad.catalogue_grad.is_some() && ct.is_none() {
                return Err(FederationError::Protocol("catalogue totals not received"));
            }
            jobs.push((id, t, ct));
        }
        let trunk_len = self.partners.values().next().expect("non-empty").params.trunk_len();
        let k = ((self.cfg.k_fraction * trunk_len as f64).round() as usize).clamp(1, trunk_len);
        let masked: Vec<(PartnerId, MaskedVector, Option<MaskedVector>)> = jobs
            .par_iter()
            .map(|&(id, t, ct)| -> Result<_, FederationError> {
                let p = &self.partners[&id];
                let st = &self.staged[&id];
                let coords = select_subset(&p.keys.trunk.subset_seed, round, trunk_len, k)?;
                let update = apply_weight(&st.grad, self.cfg.weighting, &t)?;
                let mt = self.mask_channel(id, &p.keys.trunk, &update, &coords)?;
                let mc = match (&st.grad.catalogue_grad, ct, &p.keys.catalogue) {
                    (Some(g), Some(ct), Some(keys)) => {
                        let cg = GradientUpdate {
                            trunk_grad: g.clone(),
                            head_grad: Vec::new(),
                            catalogue_grad: None,
                            ..st.grad.clone()
                        };
                        let update = apply_weight(&cg, self.cfg.weighting, &ct)?;
                        let all: Vec<u64> = (0..update.len() as u64).collect();
                        Some(self.mask_channel(id, keys, &update, &all)?)
                    }
                    _ => None,
                };
                Ok((id, mt, mc))
            })
            .collect::<Result<_, _>>()?;
        let dropped = self.cfg.faults.drop_submissions.clone();
        for (id, mt, mc) in masked {
            if dropped.contains(&(round, id)) {
                continue;
            }
            self.send(Envelope {
                round: round as u64,
                from: id,
                to: AGGREGATOR,
                kind: MessageKind::MaskedTrunk,
                payload: mt.to_bytes(),
            })?;
            if let Some(mc) = mc {
                self.send(Envelope {
                    round: round as u64,
                    from: id,
                    to: AGGREGATOR,
                    kind: MessageKind::MaskedCatalogue,
                    payload: mc.to_bytes(),
                })?;
            }
        }

        // aggregator: sum and broadcast
        let sum = self.server_sum(MessageKind::MaskedTrunk, &cohort)?;
        self.broadcast(&cohort, MessageKind::AggregateTrunk, &sum.to_bytes())?;
        if !cat_cohort.is_empty() {
            let cat_sum = self.server_sum(MessageKind::MaskedCatalogue, &cat_cohort)?;
            self.broadcast(&cat_cohort, MessageKind::AggregateCatalogue, &cat_sum.to_bytes())?;
        }

        // partners: unmask and step
        let mut inbox: BTreeMap<PartnerId, (MaskedVector, Option<MaskedVector>)> = BTreeMap::new();
        for &id in &cohort {
            let t = self.bus.drain(id, MessageKind::AggregateTrunk);
            let c = self.bus.drain(id, MessageKind::AggregateCatalogue);
            let decode = |e: Option<&Envelope>| -> Result<Option<MaskedVector>, FederationError> {
                e.map(|e| MaskedVector::from_bytes(&e.payload)).transpose().map_err(Into::into)
            };
            let t = decode(t.first())?.ok_or(FederationError::Protocol("aggregate not received"))?;
            inbox.insert(id, (t, decode(c.first())?));
        }
        let lr = self.cfg.lr;
        let next: Vec<(PartnerId, ModelParams)> = inbox
            .par_iter()
            .map(|(&id, (t, c))| -> Result<_, FederationError> {
                let p = &self.partners[&id];
                let st = self.staged.get(&id).ok_or(FederationError::Protocol("partner did not train"))?;
                let vals = unmask(t, &p.keys.trunk.common_seed, Channel::Trunk, &p.keys.trunk.cohort, &self.codec);
                let delta = scatter_update(p.params.trunk_len(), &t.coords, &vals)?;
                let mut params = p.params.apply_update(&delta, &st.grad.head_grad, lr)?;
                if let (Some(c), Some(keys)) = (c, &p.keys.catalogue) {
                    let vals = unmask(c, &keys.common_seed, Channel::Catalogue, &keys.cohort, &self.codec);
                    let delta = scatter_update(params.catalogue_flat().map_or(0, |v| v.len()), &c.coords, &vals)?;
                    params = params.apply_catalogue_update(&delta, lr)?;
                }
                Ok((id, params))
            })
            .collect::<Result<_, _>>()?;

        // commit
        let coords = inbox.values().next().map(|(t, _)| t.coords.clone()).unwrap_or_default();
        let mut train_loss = BTreeMap::new();
        for (id, params) in next {
            let p = self.partners.get_mut(&id).expect("member");
            p.params = params;
            p.cursor += 1;
            train_loss.insert(id, self.staged[&id].loss);
        }
        self.staged.clear();
        let report = RoundReport {
            round,
            cohort,
            coords,
            train_loss,
            totals,
        };
        self.history.push(report.clone());
        self.round += 1;
        self.rounds_in_phase += 1;
        Ok(report)
    }

    fn server_sum(&mut self, kind: MessageKind, cohort: &[PartnerId]) -> Result<MaskedVector, FederationError> {
        let msgs = self.bus.drain(AGGREGATOR, kind);
        let vecs: Vec<MaskedVector> = msgs
            .iter()
            .map(|e| MaskedVector::from_bytes(&e.payload))
            .collect::<Result<_, _>>()?;
        if vecs.is_empty() {
            return Err(FederationError::MissingPartner {
                round: self.round,
                expected: cohort.len(),
                got: 0,
            });
        }
        aggregate(&vecs, cohort, &self.codec).map_err(|e| match e {
            crate::secagg::SecAggError::MissingPartner { expected, got } => FederationError::MissingPartner {
                round: self.round,
                expected,
                got,
            },
            other => other.into(),
        })
    }

    /// Drops everything the round produced; only an abort notice remains in
    /// the transcript.
    fn abort(&mut self) {
        if let Some(mark) = self.round_mark.take() {
            self.bus.truncate_transcript(mark);
        }
        self.bus.clear_inboxes();
        self.staged.clear();
        let round = self.round as u64;
        for p in self.cohort() {
            let _ = self.bus.send(Envelope {
                round,
                from: AGGREGATOR,
                to: p,
                kind: MessageKind::Abort,
                payload: Vec::new(),
            });
        }
        self.bus.clear_inboxes();
    }

    /// A full round for the whole cohort.
    pub fn run_round(&mut self) -> Result<RoundReport, FederationError> {
        let ids = self.cohort();
        if let Err(e) = self.train(&ids) {
            self.abort();
            return Err(e);
        }
        self.aggregate()
    }

    /// Scores a partner's current model on one fold and publishes the
    /// scores under its pseudonym. Returns the published rows.
    pub fn test(&mut self, id: PartnerId, fold: u8) -> Result<Vec<MetricRow>, FederationError> {
        let p = self.partners.get(&id).ok_or(FederationError::UnknownPartner(id))?;
        let round = self.round.saturating_sub(1);
        let anon = anon_id(&self.master, id);
        let mut rows = Vec::new();
        let fold_rows = p.bundle.rows_in_folds(&[fold]);
        if !fold_rows.is_empty() {
            let x = p.bundle.x.select_rows(&fold_rows)?;
            let y = p.bundle.labels.select_rows(&fold_rows)?;
            let l = loss(&forward(&p.params, &x)?, &y, &p.bundle.tasks)?;
            rows.push(MetricRow {
                round,
                partner_anon_id: anon.clone(),
                task_idx: "all".into(),
                metric_name: "loss".into(),
                value: l.total,
            });
        }
        let n_folds = super::plan::N_FOLDS;
        for s in evaluate(&p.params, &p.bundle, fold, self.cfg.eval_quorum, n_folds, id)? {
            rows.push(MetricRow {
                round,
                partner_anon_id: anon.clone(),
                task_idx: s.task_idx.to_string(),
                metric_name: s.metric.name().into(),
                value: s.value,
            });
        }
        for r in &rows {
            let payload = ScorePayload {
                anon_id: r.partner_anon_id.clone(),
                org: None,
                round: r.round,
                task: r.task_idx.clone(),
                metric: r.metric_name.clone(),
                value: r.value,
            };
            self.send(Envelope {
                round: round as u64,
                from: id,
                to: AGGREGATOR,
                kind: MessageKind::TestScore,
                payload: json(&payload),
            })?;
        }
        for e in self.bus.drain(AGGREGATOR, MessageKind::TestScore) {
            let s: ScorePayload = serde_json::from_slice(&e.payload).map_err(|_| FederationError::Protocol("bad score"))?;
            self.board.push(MetricRow {
                round: s.round,
                partner_anon_id: s.anon_id,
                task_idx: s.task,
                metric_name: s.metric,
                value: s.value,
            });
        }
        Ok(rows)
    }

    /// Runs a compute plan in topological order. Train tasks that are ready
    /// together run in parallel. Returns the executed node ids in order.
    pub fn execute(&mut self, plan: &ComputePlan, eval_fold: Option<u8>) -> Result<Vec<usize>, FederationError> {
        let order = plan.validate()?;
        if plan.partners != self.cohort() {
            return Err(FederationError::Config {
                field: "partners",
                message: "plan cohort differs from the federation's".into(),
            });
        }
        if plan.batches_per_epoch != self.cfg.batches_per_epoch {
            return Err(FederationError::Config {
                field: "batches_per_epoch",
                message: "plan and config disagree".into(),
            });
        }
        let mut done = vec![false; plan.nodes.len()];
        let mut executed = Vec::with_capacity(order.len());
        let mut k = 0;
        while k < order.len() {
            let node = plan.nodes[order[k]];
            let mut wave = vec![node.id];
            if node.kind == NodeKind::Train {
                while k + wave.len() < order.len() {
                    let next = plan.nodes[order[k + wave.len()]];
                    if next.kind != NodeKind::Train || next.round != node.round {
                        break;
                    }
                    wave.push(next.id);
                }
            }
            for &id in &wave {
                assert!(plan.parents(id).all(|p| done[p]), "node {id} scheduled before a parent");
            }
            match node.kind {
                NodeKind::Train => {
                    let orgs: Vec<PartnerId> = wave.iter().map(|&i| plan.nodes[i].org).collect();
                    if let Err(e) = self.train(&orgs) {
                        self.abort();
                        return Err(e);
                    }
                }
                NodeKind::Aggregate => {
                    self.aggregate()?;
                }
                NodeKind::Test => {
                    let fold = eval_fold.ok_or(FederationError::Config {
                        field: "phase",
                        message: "test task in a phase without an evaluation fold".into(),
                    })?;
                    self.test(node.org, fold)?;
                }
            }
            for &id in &wave {
                done[id] = true;
                executed.push(id);
            }
            k += wave.len();
        }
        Ok(executed)
    }
}
