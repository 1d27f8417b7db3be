mod common;

use cft_core::metrics::{accuracy_and_macro_f1, quadratic_weighted_kappa, ConfusionMatrix};
use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-12;

#[test]
fn kappa_and_f1_match_label_level_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let cm = random_confusion(&mut rng, 5);
        let (t, p) = label_pairs(5, cm.counts());
        let kappa = quadratic_weighted_kappa(&cm).unwrap();
        let (acc, f1) = accuracy_and_macro_f1(&cm).unwrap();
        assert!(
            (kappa - qwk_oracle(&t, &p)).abs() <= TOL,
            "{kappa} vs {}",
            qwk_oracle(&t, &p)
        );
        assert!((f1 - macro_f1_oracle(&t, &p, 5)).abs() <= TOL);
        let hits = t.iter().zip(&p).filter(|(a, b)| a == b).count() as f64;
        assert!((acc - hits / t.len() as f64).abs() <= TOL);
    }
}

#[test]
fn kappa_extremes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let diag: Vec<u64> = (0..25)
            .map(|i| {
                if i % 6 == 0 {
                    rand::Rng::gen_range(&mut rng, 1..50)
                } else {
                    0
                }
            })
            .collect();
        let cm = ConfusionMatrix::from_counts(5, diag).unwrap();
        assert_eq!(quadratic_weighted_kappa(&cm).unwrap(), 1.0);
    }
    let anti = ConfusionMatrix::from_counts(2, vec![0, 7, 7, 0]).unwrap();
    assert_eq!(quadratic_weighted_kappa(&anti).unwrap(), -1.0);
}

#[test]
fn oracle_sanity_on_hand_example() {
    // truths [0,1,2], preds [0,2,2]: observed 1/3, chance (sum over 9 pairs of (t-p)^2 = 15) / 9.
    let k = qwk_oracle(&[0, 1, 2], &[0, 2, 2]);
    assert!((k - (1.0 - (1.0 / 3.0) / (15.0 / 9.0))).abs() < 1e-15);
}
