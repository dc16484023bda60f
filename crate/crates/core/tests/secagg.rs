//! Masking, cancellation, blindness and weighting of secure aggregation.

use fedsilo::model::GradientUpdate;
use fedsilo::primitives::{FixedPointCodec, Seed};
use fedsilo::secagg::{
    aggregate, apply_weight, mask, provision, scatter_update, select_subset, unmask, Channel, MaskedVector,
    PublicTotals, SecAggError, WeightingScheme,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SCHEME: WeightingScheme = WeightingScheme::DataProportional;

fn run_round(updates: &[Vec<f64>], round: u32, k: usize, setup: u64) -> (Vec<u64>, Vec<f64>) {
    let codec = FixedPointCodec::default();
    let ids: Vec<u32> = (0..updates.len() as u32).collect();
    let (keys, server) = provision(&Seed::from_u64(setup), 0, &ids, &[]);
    let dim = updates[0].len();
    let coords = select_subset(&keys[&0].trunk.subset_seed, round, dim, k).unwrap();
    let masked: Vec<MaskedVector> = ids
        .iter()
        .map(|&i| mask(&updates[i as usize], &keys[&i].trunk, i, round, &coords, &codec, SCHEME).unwrap())
        .collect();
    let sum = aggregate(&masked, &server.cohort, &codec).unwrap();
    let k0 = &keys[&0].trunk;
    (coords, unmask(&sum, &k0.common_seed, Channel::Trunk, &k0.cohort, &codec))
}

fn tol(p: usize) -> f64 {
    p as f64 * FixedPointCodec::default().resolution()
}

#[test]
fn three_party_sum_matches_plaintext() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let updates: Vec<Vec<f64>> = (0..3).map(|_| (0..50).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect();
    let (coords, got) = run_round(&updates, 7, 50, 1);
    assert_eq!(coords.len(), 50);
    for (t, &c) in coords.iter().enumerate() {
        let want: f64 = updates.iter().map(|u| u[c as usize]).sum();
        assert!((got[t] - want).abs() <= tol(3), "coord {c}: {} vs {want}", got[t]);
    }
}

#[test]
fn single_party_zero_update_unmasks_to_zero() {
    let (_, got) = run_round(&[vec![0.0; 8]], 0, 8, 2);
    assert!(got.iter().all(|&v| v == 0.0));
}

#[test]
fn pairwise_masks_cancel_exactly_in_the_ring() {
    let codec = FixedPointCodec::default();
    let (keys, server) = provision(&Seed::from_u64(4), 0, &[0, 1], &[]);
    let coords: Vec<u64> = (0..16).collect();
    let g1: Vec<f64> = (0..16).map(|i| i as f64 * 0.25).collect();
    let g2: Vec<f64> = (0..16).map(|i| -(i as f64) * 0.5 + 1.0).collect();
    let m1 = mask(&g1, &keys[&0].trunk, 0, 3, &coords, &codec, SCHEME).unwrap();
    let m2 = mask(&g2, &keys[&1].trunk, 1, 3, &coords, &codec, SCHEME).unwrap();
    let sum = aggregate(&[m1, m2], &server.cohort, &codec).unwrap();
    let k = &keys[&0].trunk;
    let got = unmask(&sum, &k.common_seed, Channel::Trunk, &k.cohort, &codec);
    for t in 0..16 {
        let want = codec.add(codec.encode(g1[t]).unwrap(), codec.encode(g2[t]).unwrap());
        assert_eq!(codec.encode(got[t]).unwrap(), want);
    }
}

#[test]
fn changing_one_coordinate_changes_one_masked_value() {
    let codec = FixedPointCodec::default();
    let (keys, _) = provision(&Seed::from_u64(5), 0, &[0, 1, 2], &[]);
    let coords: Vec<u64> = (0..10).collect();
    let a = vec![0.5; 10];
    let mut b = a.clone();
    b[6] = -2.0;
    let ma = mask(&a, &keys[&1].trunk, 1, 0, &coords, &codec, SCHEME).unwrap();
    let mb = mask(&b, &keys[&1].trunk, 1, 0, &coords, &codec, SCHEME).unwrap();
    let diffs: Vec<usize> = (0..10).filter(|&t| ma.values[t] != mb.values[t]).collect();
    assert_eq!(diffs, vec![6]);
}

#[test]
fn masked_zero_update_is_byte_uniform() {
    let codec = FixedPointCodec::default();
    let (keys, _) = provision(&Seed::from_u64(6), 0, &[0, 1, 2, 3], &[]);
    let n = 100_000usize;
    let coords: Vec<u64> = (0..n as u64).collect();
    let zero = vec![0.0; n];
    let m = mask(&zero, &keys[&2].trunk, 2, 0, &coords, &codec, SCHEME).unwrap();
    let mut counts = [0u64; 256];
    for v in &m.values {
        for b in v.to_le_bytes() {
            counts[b as usize] += 1;
        }
    }
    let expected = (8 * n) as f64 / 256.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 255 degrees of freedom, 0.999 quantile ≈ 330.5
    assert!(chi2 < 330.5, "chi2 = {chi2}");
}

#[test]
fn server_view_is_uncorrelated_with_true_sum() {
    let codec = FixedPointCodec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 10_000usize;
    let ids = [0u32, 1, 2];
    let (keys, server) = provision(&Seed::from_u64(8), 0, &ids, &[]);
    let updates: Vec<Vec<f64>> = ids.iter().map(|_| (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect()).collect();
    let coords: Vec<u64> = (0..n as u64).collect();
    let masked: Vec<_> = ids
        .iter()
        .map(|&i| mask(&updates[i as usize], &keys[&i].trunk, i, 0, &coords, &codec, SCHEME).unwrap())
        .collect();
    let sum = aggregate(&masked, &server.cohort, &codec).unwrap();
    let server_decode = codec.decode_slice(&sum.values);
    let truth: Vec<f64> = (0..n).map(|t| updates.iter().map(|u| u[t]).sum()).collect();
    let r = pearson(&server_decode, &truth);
    assert!(r.abs() < 0.05, "r = {r}");
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn subset_frequency_is_uniform() {
    let seed = Seed::from_u64(9);
    let mut counts = [0u32; 100];
    for round in 0..10_000 {
        let c = select_subset(&seed, round, 100, 10).unwrap();
        assert_eq!(c.len(), 10);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
        for i in c {
            counts[i as usize] += 1;
        }
    }
    for (i, &c) in counts.iter().enumerate() {
        let f = c as f64 / 10_000.0;
        assert!((f - 0.1).abs() <= 0.01, "coord {i}: {f}");
    }
}

#[test]
fn subset_edge_cases() {
    let seed = Seed::from_u64(10);
    assert_eq!(select_subset(&seed, 0, 5, 5).unwrap(), vec![0, 1, 2, 3, 4]);
    assert!(matches!(select_subset(&seed, 0, 5, 0), Err(SecAggError::SubsetRange { .. })));
    assert!(matches!(select_subset(&seed, 0, 5, 6), Err(SecAggError::SubsetRange { .. })));
    let (keys, _) = provision(&Seed::from_u64(11), 0, &[0, 1, 2], &[]);
    let subsets: Vec<_> = keys.values().map(|k| select_subset(&k.trunk.subset_seed, 4, 1000, 37).unwrap()).collect();
    assert!(subsets.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn withheld_vector_is_missing_partner() {
    let codec = FixedPointCodec::default();
    let (keys, server) = provision(&Seed::from_u64(12), 0, &[0, 1, 2], &[]);
    let coords = vec![0, 1];
    let m: Vec<_> = [0u32, 2]
        .iter()
        .map(|&i| mask(&[1.0, 2.0], &keys[&i].trunk, i, 0, &coords, &codec, SCHEME).unwrap())
        .collect();
    assert_eq!(
        aggregate(&m, &server.cohort, &codec),
        Err(SecAggError::MissingPartner { expected: 3, got: 2 })
    );
}

#[test]
fn mismatched_round_is_rejected() {
    let codec = FixedPointCodec::default();
    let (keys, server) = provision(&Seed::from_u64(13), 0, &[0, 1], &[]);
    let coords = vec![0];
    let a = mask(&[1.0], &keys[&0].trunk, 0, 1, &coords, &codec, SCHEME).unwrap();
    let b = mask(&[1.0], &keys[&1].trunk, 1, 2, &coords, &codec, SCHEME).unwrap();
    assert!(matches!(aggregate(&[a, b], &server.cohort, &codec), Err(SecAggError::RoundMismatch { .. })));
}

#[test]
fn keys_are_shared_where_they_should_be() {
    let (keys, server) = provision(&Seed::from_u64(14), 2, &[3, 1, 2], &[1, 3]);
    assert_eq!(server.cohort, vec![1, 2, 3]);
    assert_eq!(server.catalogue_cohort, vec![1, 3]);
    let k: Vec<_> = keys.values().collect();
    assert!(k.windows(2).all(|w| w[0].trunk.common_seed == w[1].trunk.common_seed));
    assert_eq!(keys[&1].trunk.pairwise[&2], keys[&2].trunk.pairwise[&1]);
    assert_ne!(keys[&1].trunk.pairwise[&2], keys[&1].trunk.pairwise[&3]);
    assert!(keys[&2].catalogue.is_none());
    let c1 = keys[&1].catalogue.as_ref().unwrap();
    assert_ne!(c1.common_seed, keys[&1].trunk.common_seed);
    let (next, _) = provision(&Seed::from_u64(14), 3, &[1, 2, 3], &[]);
    assert_ne!(next[&1].trunk.common_seed, keys[&1].trunk.common_seed);
}

fn grad(trunk: Vec<f64>, n: usize, nnz: usize) -> GradientUpdate {
    GradientUpdate {
        trunk_grad: trunk,
        head_grad: vec![],
        catalogue_grad: None,
        n_samples: n,
        nnz,
    }
}

#[test]
fn data_proportional_weighting_is_pooled_mean() {
    let g1 = grad(vec![1.0, -2.0], 1, 4);
    let g2 = grad(vec![3.0, 2.0], 3, 4);
    let totals = PublicTotals {
        n_partners: 2,
        total_samples: 4,
        total_nnz: 8,
    };
    let a = apply_weight(&g1, WeightingScheme::DataProportional, &totals).unwrap();
    let b = apply_weight(&g2, WeightingScheme::DataProportional, &totals).unwrap();
    let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
    assert_eq!(sum, vec![(1.0 + 9.0) / 4.0, (-2.0 + 6.0) / 4.0]);

    let u: Vec<f64> = [&g1, &g1]
        .iter()
        .map(|g| apply_weight(g, WeightingScheme::Uniform, &totals).unwrap())
        .fold(vec![0.0; 2], |acc, v| acc.iter().zip(&v).map(|(x, y)| x + y).collect());
    assert_eq!(u, g1.trunk_grad);

    let solo = PublicTotals {
        n_partners: 1,
        total_samples: 1,
        total_nnz: 4,
    };
    for s in [WeightingScheme::DataProportional, WeightingScheme::Uniform, WeightingScheme::NnzProportional] {
        assert_eq!(apply_weight(&g1, s, &solo).unwrap(), g1.trunk_grad);
    }
    let zero = PublicTotals {
        n_partners: 1,
        total_samples: 0,
        total_nnz: 0,
    };
    assert_eq!(apply_weight(&g1, WeightingScheme::NnzProportional, &zero), Err(SecAggError::ZeroDenominator));
}

#[test]
fn scatter_places_values_only_at_coords() {
    assert_eq!(scatter_update(5, &[1, 3], &[2.0, -1.0]).unwrap(), vec![0.0, 2.0, 0.0, -1.0, 0.0]);
    assert_eq!(scatter_update(2, &[0, 1], &[4.0, 5.0]).unwrap(), vec![4.0, 5.0]);
    assert!(matches!(scatter_update(2, &[2], &[1.0]), Err(SecAggError::CoordOutOfRange { .. })));
}

#[test]
fn wire_round_trip_and_layout() {
    let m = MaskedVector {
        round: 9,
        sender: 2,
        coords: vec![1, 5],
        values: vec![u64::MAX, 7],
        weight_tag: 1,
    };
    let b = m.to_bytes();
    assert_eq!(b.len(), 8 + 4 + 8 + 32 + 1);
    assert_eq!(&b[..8], &9u64.to_le_bytes());
    assert_eq!(&b[8..12], &2u32.to_le_bytes());
    assert_eq!(b[b.len() - 1], 1);
    assert_eq!(MaskedVector::from_bytes(&b).unwrap(), m);
    assert!(MaskedVector::from_bytes(&b[..b.len() - 1]).is_err());
    let mut bad = m.clone();
    bad.coords = vec![5, 1];
    assert!(MaskedVector::from_bytes(&bad.to_bytes()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cancellation_holds_for_any_cohort(
        p in 1usize..=16,
        dim in 1usize..24,
        round in 0u32..1000,
        setup in any::<u64>(),
        frac in 0.1f64..=1.0,
        data_seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
        let updates: Vec<Vec<f64>> = (0..p).map(|_| (0..dim).map(|_| rng.gen_range(-6.0..6.0)).collect()).collect();
        let k = ((frac * dim as f64).ceil() as usize).clamp(1, dim);
        let (coords, got) = run_round(&updates, round, k, setup);
        prop_assert_eq!(coords.len(), k);
        for (t, &c) in coords.iter().enumerate() {
            let want: f64 = updates.iter().map(|u| u[c as usize]).sum();
            prop_assert!((got[t] - want).abs() <= tol(p));
        }
    }

    #[test]
    fn wire_round_trips(round in any::<u64>(), sender in any::<u32>(), vals in proptest::collection::vec(any::<u64>(), 0..20), tag in any::<u8>()) {
        let m = MaskedVector { round, sender, coords: (0..vals.len() as u64).map(|c| c * 3).collect(), values: vals, weight_tag: tag };
        prop_assert_eq!(MaskedVector::from_bytes(&m.to_bytes()).unwrap(), m);
    }
}
