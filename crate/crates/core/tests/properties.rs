use proptest::prelude::*;

use conal_core::analysis::{aligned_recovery_score, confusion_pair_heatmap, recovery_score};
use conal_core::baselines::majority_vote;
use conal_core::conal::mix;
use conal_core::data::{ConfusionMatrix, ConfusionRole, CrowdDataset, Split, MISSING};
use conal_core::numerics::{softmax, Matrix};
use conal_core::theory::{decomposition_gap, entropy, kl_rows};

fn simplex(c: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, c).prop_map(|w| {
        let s: f64 = w.iter().sum();
        w.iter().map(|v| v / s).collect()
    })
}

fn confusion(c: usize) -> impl Strategy<Value = ConfusionMatrix> {
    prop::collection::vec(simplex(c), c)
        .prop_map(|rows| ConfusionMatrix::new(Matrix::from_rows(&rows).unwrap(), ConfusionRole::Global).unwrap())
}

fn sized_confusions() -> impl Strategy<Value = (ConfusionMatrix, ConfusionMatrix)> {
    (2usize..6).prop_flat_map(|c| (confusion(c), confusion(c)))
}

proptest! {
    #[test]
    fn kl_is_nonnegative_and_zero_on_self(p in simplex(5), q in simplex(5)) {
        prop_assert!(kl_rows(&p, &q) >= -1e-12);
        prop_assert!(kl_rows(&p, &p).abs() < 1e-12);
    }

    #[test]
    fn entropy_is_at_most_log_c(p in simplex(6)) {
        let h = entropy(&p);
        prop_assert!(h >= 0.0 && h <= 6f64.ln() + 1e-12);
    }

    #[test]
    fn mixture_kl_never_exceeds_decomposition((g, r) in sized_confusions(), omega in 0.0f64..=1.0, a in 0usize..6, b in 0usize..6) {
        let c = g.num_classes();
        let (mixture, decomposed) = decomposition_gap(&g, &r, omega, a % c, b % c);
        prop_assert!(decomposed >= mixture - 1e-12);
    }

    #[test]
    fn mixture_is_a_distribution(p in simplex(4), q in simplex(4), w in 0.0f64..=1.0) {
        let m = mix(&p, &q, w);
        prop_assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(m.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn softmax_is_shift_invariant(x in prop::collection::vec(-50.0f64..50.0, 1..8), shift in -100.0f64..100.0) {
        let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
        let (a, b) = (softmax(&x), softmax(&shifted));
        prop_assert!(a.iter().zip(&b).all(|(u, v)| (u - v).abs() < 1e-12));
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recovery_is_a_bounded_symmetric_distance((g, r) in sized_confusions()) {
        let ab = recovery_score(&g, &r).unwrap().mean;
        let ba = recovery_score(&r, &g).unwrap().mean;
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!(recovery_score(&g, &g).unwrap().mean == 0.0);
        prop_assert!(aligned_recovery_score(&g, &r).unwrap().mean <= ab + 1e-12);
    }

    #[test]
    fn aligned_recovery_undoes_row_permutation(g in confusion(4), shift in 1usize..4) {
        let rows: Vec<Vec<f64>> = (0..4).map(|z| g.row((z + shift) % 4).to_vec()).collect();
        let permuted = ConfusionMatrix::new(Matrix::from_rows(&rows).unwrap(), ConfusionRole::Global).unwrap();
        prop_assert!(aligned_recovery_score(&permuted, &g).unwrap().mean < 1e-12);
    }

    #[test]
    fn majority_vote_picks_a_most_frequent_label(row in prop::collection::vec(prop_oneof![Just(MISSING), 0i64..5], 1..12)) {
        prop_assume!(row.iter().any(|&l| l != MISSING));
        let winner = majority_vote(&row).unwrap() as i64;
        let count = |l: i64| row.iter().filter(|&&x| x == l).count();
        let best = (0..5).map(count).max().unwrap();
        prop_assert_eq!(count(winner), best);
        prop_assert!((0..winner).all(|l| count(l) < best));
    }

    #[test]
    fn heatmap_is_invariant_to_duplicating_instances(seed_labels in prop::collection::vec((0usize..3, prop::collection::vec(0i64..3, 4)), 6..20)) {
        let n = seed_labels.len();
        let truth: Vec<usize> = seed_labels.iter().map(|(z, _)| *z).collect();
        let ann: Vec<i64> = seed_labels.iter().flat_map(|(_, a)| a.clone()).collect();
        let once = CrowdDataset::new(Matrix::zeros(n, 1), 4, ann.clone(), Some(truth.clone()), 3, Split::Train).unwrap();
        let twice_ann: Vec<i64> = ann.iter().chain(&ann).copied().collect();
        let twice_truth: Vec<usize> = truth.iter().chain(&truth).copied().collect();
        let twice = CrowdDataset::new(Matrix::zeros(2 * n, 1), 4, twice_ann, Some(twice_truth.clone()), 3, Split::Train).unwrap();
        let a = confusion_pair_heatmap(&once, &truth, 0.3).unwrap();
        let b = confusion_pair_heatmap(&twice, &twice_truth, 0.3).unwrap();
        prop_assert_eq!(a.fractions, b.fractions);
    }
}
