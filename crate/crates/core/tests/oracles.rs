mod support;

use dgcore::dg_stats::{class_stats, mahalanobis, MetricKind};
use dgcore::losses::{contrastive_batch_loss, cross_entropy, log_pair_similarity};
use dgcore::tensor::{Graph, Tensor};
use proptest::prelude::*;
use support::{contrastive_oracle, covariance_oracle_error, loss_oracle_errors};

#[test]
fn batch_losses_match_pairwise_oracles() {
    let (ct, dg) = loss_oracle_errors(50, 7).unwrap();
    assert!(ct <= 1e-9, "contrastive off by {ct:e}");
    assert!(dg <= 1e-9, "alignment off by {dg:e}");
}

#[test]
fn covariance_matches_second_moment_form() {
    let err = covariance_oracle_error(40, 3).unwrap();
    assert!(err <= 1e-10, "covariance off by {err:e}");
}

#[test]
fn uniform_logits_give_log_class_count() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(&[3, 4]));
    let ce = cross_entropy(&mut g, z, &[0, 2, 3]).unwrap();
    assert!((g.value(ce).item() - 4f64.ln()).abs() <= 1e-12);
}

#[test]
fn identity_metric_gives_euclidean_distance() {
    let eye = Tensor::identity(2);
    let d = mahalanobis(&[4.0, 6.0], &[1.0, 2.0], eye.data()).unwrap();
    assert!((d - 5.0).abs() <= 1e-12);
}

#[test]
fn self_similarity_is_inverse_temperature() {
    let p = [0.3, -1.2, 2.0];
    assert!((log_pair_similarity(&p, &p, 0.05).unwrap() - 20.0).abs() <= 1e-12);
}

#[test]
fn inverse_metric_undoes_regularized_covariance() {
    let z: Vec<Vec<f64>> = (0..20)
        .map(|i| (0..5).map(|k| ((i * 7 + k * 3) % 11) as f64 / 5.0 - 1.0).collect())
        .collect();
    let stats = class_stats(&[z], 1e-3, MetricKind::RegularizedInverse).unwrap();
    let s = stats.get(0).unwrap();
    for i in 0..5 {
        for j in 0..5 {
            let v: f64 = (0..5)
                .map(|k| (s.covariance[i * 5 + k] + if i == k { 1e-3 } else { 0.0 }) * s.metric[k * 5 + j])
                .sum();
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-8, "({i},{j}) = {v}");
        }
    }
}

fn batch() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
    (2usize..9, 2usize..5).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), n),
            prop::collection::vec(0usize..3, n),
        )
    })
}

fn graph_contrastive(emb: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let mut g = Graph::new();
    let e = g.constant(Tensor::from_rows(emb).unwrap());
    let v = contrastive_batch_loss(&mut g, e, labels, tau, false).unwrap();
    g.value(v).item()
}

proptest! {
    #[test]
    fn contrastive_is_nonnegative_and_scale_free((emb, labels) in batch(), scale in 0.1f64..10.0) {
        prop_assume!(emb.iter().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-6));
        let base = graph_contrastive(&emb, &labels, 0.1);
        prop_assert!(base >= 0.0);
        let scaled: Vec<Vec<f64>> = emb.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
        prop_assert!((graph_contrastive(&scaled, &labels, 0.1) - base).abs() < 1e-9);
        prop_assert!((contrastive_oracle(&emb, &labels, 0.1) - base).abs() < 1e-9);
    }

    #[test]
    fn contrastive_ignores_sample_order((emb, labels) in batch(), rot in 0usize..8) {
        prop_assume!(emb.iter().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-6));
        let k = rot % emb.len();
        let mut e2 = emb.clone();
        let mut l2 = labels.clone();
        e2.rotate_left(k);
        l2.rotate_left(k);
        prop_assert!((graph_contrastive(&e2, &l2, 0.2) - graph_contrastive(&emb, &labels, 0.2)).abs() < 1e-9);
    }

    #[test]
    fn covariance_is_symmetric_psd(rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..20),
                                   probe in prop::collection::vec(-1.0f64..1.0, 3)) {
        let stats = class_stats(&[rows], 0.0, MetricKind::Covariance).unwrap();
        let s = stats.get(0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                prop_assert_eq!(s.covariance[i * 3 + j], s.covariance[j * 3 + i]);
            }
        }
        let q: f64 = (0..9).map(|ij| probe[ij / 3] * s.covariance[ij] * probe[ij % 3]).sum();
        prop_assert!(q >= -1e-9);
    }

    #[test]
    fn mahalanobis_is_nonnegative_and_zero_at_mean(z in prop::collection::vec(-4.0f64..4.0, 4)) {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| (0..4).map(|k| ((i * 5 + k * 3) % 7) as f64 - 3.0).collect()).collect();
        let stats = class_stats(&[rows], 1e-3, MetricKind::RegularizedInverse).unwrap();
        let s = stats.get(0).unwrap();
        prop_assert!(mahalanobis(&z, &s.mean, &s.metric).unwrap() >= 0.0);
        prop_assert_eq!(mahalanobis(&s.mean, &s.mean, &s.metric).unwrap(), 0.0);
    }
}
