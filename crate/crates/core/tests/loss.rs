use cmc_core::loss::{self, EmbeddingSet};
use cmc_core::{oracle, rng, verify, Tensor};
use proptest::prelude::*;

#[test]
fn vectorised_loss_matches_nested_loops() {
    let worst = verify::oracle_agreement(11, 200).unwrap();
    assert!(worst < 1e-6, "max deviation {worst:e}");
}

#[test]
fn two_scenes_two_views_closed_form() {
    let z = Tensor::new(vec![2, 2, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
    let e = EmbeddingSet::new(z, vec![0, 1], 2, 1.0).unwrap();
    let got = loss::fullgraph_cmc_loss(&e).unwrap();
    let want = 4.0 * (1.0 + (-1.0f64).exp()).ln();
    assert!((got - want).abs() < 1e-5, "{got} vs {want}");
    assert!((got - 1.25304).abs() < 1e-5);
}

#[test]
fn single_pair_is_zero_and_uniform_case_is_log() {
    let z = Tensor::new(vec![2, 3], vec![0.4, -0.2, 1.0, -0.7, 0.3, 0.1]).unwrap();
    assert_eq!(loss::pairwise_loss(&z, &[1, 0], 0.5).unwrap(), 0.0);
    for n in 1..=5usize {
        let z = Tensor::ones(&[2 * n, 3]);
        let partner: Vec<usize> = (0..2 * n).map(|i| i ^ 1).collect();
        let got = loss::pairwise_loss(&z, &partner, 0.3).unwrap();
        let want = 2.0 * n as f64 * ((2 * n - 1) as f64).ln();
        assert!((got - want).abs() < 1e-6, "n={n}: {got} vs {want}");
    }
}

#[test]
fn unmatched_pairing_is_rejected() {
    let z = Tensor::ones(&[4, 2]);
    assert!(loss::pairwise_loss(&z, &[1, 0, 3, 3], 0.5).is_err());
}

#[test]
fn loss_is_nonnegative_and_counts_ordered_pairs() {
    assert_eq!(loss::relationships_per_instance(6), 15);
    let mut r = rng::stream(3, &[]);
    for _ in 0..50 {
        let e = verify::random_embedding_set(&mut r);
        assert!(loss::fullgraph_cmc_loss(&e).unwrap() >= 0.0);
    }
}

#[test]
fn oracle_refuses_oversized_batches() {
    let e = EmbeddingSet::new(Tensor::ones(&[33, 2, 2]), vec![0, 1], 2, 0.1).unwrap();
    assert!(oracle::loss_oracle(&e).is_err());
}

fn instance() -> impl Strategy<Value = (usize, usize, usize, usize, f64, Vec<f64>)> {
    (2usize..=4, 1usize..=3, 1usize..=2, 1usize..=8, 0.05f64..2.0)
        .prop_filter("at least two views", |(_, m, n, _, _)| m * n >= 2)
        .prop_flat_map(|(b, m, n, d, tau)| {
            let len = b * m * n * d;
            (
                Just(b),
                Just(m),
                Just(n),
                Just(d),
                Just(tau),
                prop::collection::vec(prop_oneof![-2.0f64..-0.05, 0.05f64..2.0], len),
            )
        })
}

fn set(b: usize, m: usize, n: usize, d: usize, tau: f64, z: Vec<f64>, labels: Vec<usize>) -> EmbeddingSet {
    EmbeddingSet::new(Tensor::new(vec![b, m * n, d], z).unwrap(), labels, m, tau).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn batch_permutation_invariance((b, m, n, d, tau, z) in instance(), rot in 0usize..4) {
        let v = m * n;
        let labels: Vec<usize> = (0..v).map(|i| i / n).collect();
        let base = loss::fullgraph_cmc_loss(&set(b, m, n, d, tau, z.clone(), labels.clone())).unwrap();
        // rotate then reverse the instances
        let mut order: Vec<usize> = (0..b).map(|t| (t + rot) % b).collect();
        order.reverse();
        let permuted: Vec<f64> = order.iter().flat_map(|&t| z[t * v * d..(t + 1) * v * d].to_vec()).collect();
        let other = loss::fullgraph_cmc_loss(&set(b, m, n, d, tau, permuted, labels)).unwrap();
        prop_assert!((base - other).abs() < 1e-6, "{} vs {}", base, other);
    }

    #[test]
    fn view_relabel_invariance((b, m, n, d, tau, z) in instance(), rot in 0usize..6) {
        let v = m * n;
        let labels: Vec<usize> = (0..v).map(|i| i / n).collect();
        let base = loss::fullgraph_cmc_loss(&set(b, m, n, d, tau, z.clone(), labels.clone())).unwrap();
        let perm: Vec<usize> = (0..v).map(|w| (w + rot) % v).rev().collect();
        let mut relabelled = Vec::with_capacity(z.len());
        for t in 0..b {
            for &w in &perm {
                let at = (t * v + w) * d;
                relabelled.extend_from_slice(&z[at..at + d]);
            }
        }
        let new_labels: Vec<usize> = perm.iter().map(|&w| labels[w]).collect();
        let other = loss::fullgraph_cmc_loss(&set(b, m, n, d, tau, relabelled, new_labels)).unwrap();
        prop_assert!((base - other).abs() < 1e-6, "{} vs {}", base, other);
    }

    #[test]
    fn positive_scaling_invariance((b, m, n, d, tau, z) in instance(), scales in prop::collection::vec(0.01f64..100.0, 24)) {
        let v = m * n;
        let labels: Vec<usize> = (0..v).map(|i| i / n).collect();
        let base = loss::fullgraph_cmc_loss(&set(b, m, n, d, tau, z.clone(), labels.clone())).unwrap();
        let scaled: Vec<f64> = z.iter().enumerate().map(|(i, x)| x * scales[(i / d) % scales.len()]).collect();
        let other = loss::fullgraph_cmc_loss(&set(b, m, n, d, tau, scaled, labels)).unwrap();
        prop_assert!((base - other).abs() < 1e-6, "{} vs {}", base, other);
    }

    #[test]
    fn cosine_ignores_positive_scale(
        u in prop::collection::vec(0.1f64..3.0, 5),
        w in prop::collection::vec(-3.0f64..-0.1, 5),
        alpha in 0.01f64..50.0,
        beta in 0.01f64..50.0,
    ) {
        let a = Tensor::new(vec![5], u.clone()).unwrap();
        let b = Tensor::new(vec![5], w.clone()).unwrap();
        let sa = Tensor::new(vec![5], u.iter().map(|x| x * alpha).collect()).unwrap();
        let sb = Tensor::new(vec![5], w.iter().map(|x| x * beta).collect()).unwrap();
        let d0 = loss::cosine_similarity(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&d0));
        prop_assert!((d0 - loss::cosine_similarity(&sa, &sb).unwrap()).abs() < 1e-6);
    }
}

#[test]
fn zero_vector_is_degenerate() {
    let u = Tensor::zeros(&[3]);
    let v = Tensor::ones(&[3]);
    assert!(loss::cosine_similarity(&u, &v).is_err());
    assert_eq!(loss::cosine_similarity(&v, &v).unwrap(), 1.0);
}
