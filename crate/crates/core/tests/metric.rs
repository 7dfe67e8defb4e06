mod common;

use atlas_match::metric::{
    classify_triplet, contrastive_loss, euclidean_distance, mine_triplets, triplet_loss,
    MarginConfig, MiningMode, PairBatch, TripletKind,
};
use atlas_match::tensornet::Tensor;
use atlas_match::Error;
use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn contrastive_gradients_match_fd() {
    for seed in 0..20 {
        let r = contrastive_gradcheck(seed);
        assert!(r.max_rel <= GRAD_TOL, "seed {seed}: {r:?}");
    }
}

#[test]
fn triplet_gradients_match_fd_in_both_regimes() {
    for seed in 0..20 {
        for active in [true, false] {
            let r = triplet_gradcheck(seed, active);
            assert!(r.max_rel <= GRAD_TOL, "seed {seed} active {active}: {r:?}");
        }
    }
}

#[test]
fn mining_equals_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let margin = MarginConfig::new(0.5).unwrap();
    for _ in 0..200 {
        let (emb, dim, labels) = random_mining_batch(&mut rng);
        let t = Tensor::new(vec![labels.len(), dim], emb.clone()).unwrap();
        for mode in [MiningMode::SemiHard, MiningMode::Hard, MiningMode::All] {
            let want = brute_force_mine(&emb, dim, &labels, mode, margin.margin);
            match mine_triplets(&t, &labels, mode, &margin) {
                Ok(set) => assert_eq!(set.triplets, want),
                Err(Error::NoValidTriplets) => assert!(want.is_empty()),
                Err(e) => panic!("{e}"),
            }
        }
    }
}

#[test]
fn hand_values() {
    let m = MarginConfig::new(1.0).unwrap();
    assert_eq!(euclidean_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
    let neg = PairBatch::new(
        Tensor::new(vec![1, 1], vec![0.0]).unwrap(),
        Tensor::new(vec![1, 1], vec![0.4]).unwrap(),
        vec![false],
    )
    .unwrap();
    assert!((contrastive_loss(&neg, &m).loss - 0.18).abs() < 1e-7);
    // d(A,P)=0.3, d(A,N)=0.1, m=0.5 -> 0.7
    let half = MarginConfig::new(0.5).unwrap();
    let out = triplet_loss(&[0.0], &[0.3], &[-0.1], &half).unwrap();
    assert!((out.loss - 0.7).abs() < 1e-7);
    let small = MarginConfig::new(0.2).unwrap();
    assert_eq!(classify_triplet(0.3, 0.35, &small), TripletKind::SemiHard);
    assert_eq!(classify_triplet(0.3, 0.2, &half), TripletKind::Hard);
    assert_eq!(classify_triplet(0.3, 0.9, &half), TripletKind::Easy);
}

proptest! {
    #[test]
    fn distance_is_symmetric(a in prop::collection::vec(-1e3f32..1e3, 1..16), seed in any::<u64>()) {
        let b: Vec<f32> = a.iter().enumerate().map(|(i, v)| v * 0.5 + (seed % 7) as f32 + i as f32).collect();
        prop_assert_eq!(euclidean_distance(&a, &b).unwrap(), euclidean_distance(&b, &a).unwrap());
    }

    #[test]
    fn triplet_loss_bounds(a in prop::collection::vec(-2f32..2.0, 4), p in prop::collection::vec(-2f32..2.0, 4),
                           n in prop::collection::vec(-2f32..2.0, 4), m in 0.01f64..2.0) {
        let margin = MarginConfig::new(m).unwrap();
        let out = triplet_loss(&a, &p, &n, &margin).unwrap();
        let dap = euclidean_distance(&a, &p).unwrap();
        prop_assert!(out.loss >= 0.0);
        prop_assert!(out.loss <= dap + m + 1e-12);
    }
}
