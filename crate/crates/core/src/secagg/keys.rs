//! Round key material, provisioned from the run's trusted-setup seed.

use std::collections::BTreeMap;

use crate::primitives::{Purpose, Seed};

pub type PartnerId = u32;

/// Which aggregation channel a key set or message belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Channel {
    Trunk,
    Catalogue,
}

impl Channel {
    pub(crate) fn pair_purpose(self) -> Purpose {
        match self {
            Channel::Trunk => Purpose::PairMask,
            Channel::Catalogue => Purpose::CataloguePairMask,
        }
    }

    pub(crate) fn common_purpose(self) -> Purpose {
        match self {
            Channel::Trunk => Purpose::CommonMask,
            Channel::Catalogue => Purpose::CatalogueCommonMask,
        }
    }
}

/// One partner's secrets for one channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelKeys {
    pub channel: Channel,
    /// Sorted member ids, including this partner.
    pub cohort: Vec<PartnerId>,
    pub pairwise: BTreeMap<PartnerId, Seed>,
    pub common_seed: Seed,
    pub subset_seed: Seed,
}

impl ChannelKeys {
    pub fn n_parties(&self) -> usize {
        self.cohort.len()
    }
}

/// Everything a partner holds.
#[derive(Clone, Debug, PartialEq)]
pub struct PartnerKeys {
    pub me: PartnerId,
    pub epoch: u32,
    pub trunk: ChannelKeys,
    pub catalogue: Option<ChannelKeys>,
}

/// What the aggregator knows: membership only, no seed of any kind.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ServerKeyView {
    pub epoch: u32,
    pub cohort: Vec<PartnerId>,
    pub catalogue_cohort: Vec<PartnerId>,
}

const KIND_PAIR: u64 = 1;
const KIND_COMMON: u64 = 2;
const KIND_SUBSET: u64 = 3;

fn key_index(kind: u64, channel: Channel, epoch: u32, a: PartnerId, b: PartnerId) -> u64 {
    let ch = match channel {
        Channel::Trunk => 0,
        Channel::Catalogue => 1,
    };
    assert!(a < 1 << 16 && b < 1 << 16, "partner ids must fit 16 bits");
    (kind << 52) | (ch << 50) | ((epoch as u64 & 0x3ffff) << 32) | ((a as u64) << 16) | b as u64
}

fn channel_keys(setup: &Seed, channel: Channel, epoch: u32, cohort: &[PartnerId], me: PartnerId) -> ChannelKeys {
    let pairwise = cohort
        .iter()
        .filter(|&&j| j != me)
        .map(|&j| {
            let (lo, hi) = if me < j { (me, j) } else { (j, me) };
            (j, setup.child(Purpose::KeyDerivation, key_index(KIND_PAIR, channel, epoch, lo, hi)))
        })
        .collect();
    ChannelKeys {
        channel,
        cohort: cohort.to_vec(),
        pairwise,
        common_seed: setup.child(Purpose::KeyDerivation, key_index(KIND_COMMON, channel, epoch, 0, 0)),
        subset_seed: setup.child(Purpose::KeyDerivation, key_index(KIND_SUBSET, channel, epoch, 0, 0)),
    }
}

/// Deals keys for a membership epoch.
///
/// Real key agreement is out of scope: a trusted setup derives every seed
/// from `setup_seed`, hands each partner its own view and the aggregator a
/// view with no secrets at all.
pub fn provision(
    setup_seed: &Seed,
    epoch: u32,
    cohort: &[PartnerId],
    catalogue_cohort: &[PartnerId],
) -> (BTreeMap<PartnerId, PartnerKeys>, ServerKeyView) {
    let mut cohort = cohort.to_vec();
    cohort.sort_unstable();
    cohort.dedup();
    let mut cat: Vec<PartnerId> = catalogue_cohort
        .iter()
        .copied()
        .filter(|p| cohort.contains(p))
        .collect();
    cat.sort_unstable();
    cat.dedup();
    let partners = cohort
        .iter()
        .map(|&me| {
            let keys = PartnerKeys {
                me,
                epoch,
                trunk: channel_keys(setup_seed, Channel::Trunk, epoch, &cohort, me),
                catalogue: cat
                    .contains(&me)
                    .then(|| channel_keys(setup_seed, Channel::Catalogue, epoch, &cat, me)),
            };
            (me, keys)
        })
        .collect();
    (
        partners,
        ServerKeyView {
            epoch,
            cohort,
            catalogue_cohort: cat,
        },
    )
}
