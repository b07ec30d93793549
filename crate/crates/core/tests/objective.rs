mod common;

use common::*;
use hftt_core::objective::{focal_weights, loss, loss_and_gradient, predict_out_probability};
use hftt_core::{DetectorModel, LossConfig, LossVariant};
use proptest::prelude::*;

#[test]
fn analytic_gradient_matches_finite_differences() {
    let (worst, covered) = gradient_check(100);
    assert!(worst <= 1e-5, "relative error {worst}");
    assert_eq!(covered, 2 * 4 * 3, "every variant/gamma/lambda combination");
}

#[test]
fn small_fixed_instance_gradient() {
    // d=8, K=3, N=2, batches of 4
    let mut r = rng(7);
    let model = random_model(&mut r, 8, 3, 2, 0.5);
    let b_in = unit_rows(&mut r, 4, 8);
    let b_all = unit_rows(&mut r, 4, 8);
    let cfg = LossConfig::default();
    let (bd, g) = loss_and_gradient(&model, &b_in, &b_all, &cfg).unwrap();
    let fd = finite_difference_gradient(&model, &b_in, &b_all, &cfg, &bd.focal_weights, 1e-6);
    assert!(max_relative_error(&g, &fd) < 1e-5);
}

#[test]
fn focal_identities_on_random_batches() {
    let mut r = rng(11);
    for _ in 0..1000 {
        let n = r.random_range(1..=64);
        let probs: Vec<f64> = (0..n).map(|_| r.random_range(1e-9..1.0)).collect();
        let gamma = r.random_range(0.0..4.0);
        let beta = focal_weights(&probs, gamma).unwrap();
        let sum: f64 = beta.iter().sum();
        assert!(
            ((sum - n as f64) / n as f64).abs() <= 1e-9,
            "sum {sum} for {n}"
        );
        assert!(beta.iter().all(|&b| b >= 0.0));
        assert!(focal_weights(&probs, 0.0)
            .unwrap()
            .iter()
            .all(|&b| b == 1.0));
    }
}

#[test]
fn gamma_zero_matches_plain_cross_entropy() {
    let mut r = rng(3);
    let model = random_model(&mut r, 6, 2, 3, 0.2);
    let b_in = unit_rows(&mut r, 5, 6);
    let b_all = unit_rows(&mut r, 7, 6);
    let cfg = LossConfig {
        gamma: 0.0,
        lambda: 0.25,
        variant: LossVariant::Focal,
    };
    let bd = loss(&model, &b_in, &b_all, &cfg).unwrap();
    let plain: f64 = b_all
        .chunks(6)
        .map(|x| -predict_out_probability(&model, x).unwrap().ln())
        .sum::<f64>()
        * 0.75;
    assert_eq!(bd.focal_weights, vec![1.0; 7]);
    assert!((bd.out_term - plain).abs() <= 1e-12 * plain.abs());
}

#[test]
fn lambda_one_keeps_only_in_term_gradient() {
    let mut r = rng(5);
    let model = random_model(&mut r, 5, 2, 2, 0.3);
    let b_in = unit_rows(&mut r, 3, 5);
    let b_all = unit_rows(&mut r, 3, 5);
    let other_all = unit_rows(&mut r, 3, 5);
    let cfg = LossConfig {
        lambda: 1.0,
        ..LossConfig::default()
    };
    let (bd, g1) = loss_and_gradient(&model, &b_in, &b_all, &cfg).unwrap();
    let (_, g2) = loss_and_gradient(&model, &b_in, &other_all, &cfg).unwrap();
    assert_eq!(bd.out_term, 0.0);
    assert_eq!(bd.total, bd.in_term);
    assert_eq!(g1, g2);
}

fn permute_rows(rows: &[f64], dim: usize, perm: &[usize]) -> Vec<f64> {
    perm.iter()
        .flat_map(|&i| rows[i * dim..(i + 1) * dim].to_vec())
        .collect()
}

fn shuffled(seed: u64, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng(seed));
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn probability_increases_with_any_out_similarity(seed in any::<u64>(), j in 0usize..4, delta in 0.01f64..0.5) {
        let mut r = rng(seed);
        let model = random_model(&mut r, 6, 2, 4, 0.5);
        let x = unit_rows(&mut r, 1, 6);
        let base = predict_out_probability(&model, &x).unwrap();
        // move w_j toward x: x.w_j grows, other similarities fixed
        let mut w = model.trainable().to_vec();
        for (wi, xi) in w[j * 6..(j + 1) * 6].iter_mut().zip(&x) {
            *wi += delta * xi;
        }
        let moved = predict_out_probability(&model.with_trainable(w).unwrap(), &x).unwrap();
        prop_assert!(moved > base);
        prop_assert!(base > 0.0 && base < 1.0);
    }

    #[test]
    fn loss_and_gradient_ignore_row_order(seed in any::<u64>(), gamma in 0.0f64..3.0, lambda in 0.0f64..1.0) {
        let mut r = rng(seed);
        let dim = 5;
        let model = random_model(&mut r, dim, 3, 3, 0.2);
        let b_in = unit_rows(&mut r, 6, dim);
        let b_all = unit_rows(&mut r, 7, dim);
        let cfg = LossConfig { gamma, lambda, variant: LossVariant::Focal };
        let (a, ga) = loss_and_gradient(&model, &b_in, &b_all, &cfg).unwrap();
        let pi = permute_rows(&b_in, dim, &shuffled(seed ^ 1, 6));
        let pa = permute_rows(&b_all, dim, &shuffled(seed ^ 2, 7));
        let (b, gb) = loss_and_gradient(&model, &pi, &pa, &cfg).unwrap();
        prop_assert!((a.total - b.total).abs() <= 1e-12 * a.total.abs().max(1.0));
        prop_assert!(max_relative_error(&ga, &gb) <= 1e-12);
    }

    #[test]
    fn total_is_sum_of_terms(seed in any::<u64>(), disjoint in any::<bool>()) {
        let mut r = rng(seed);
        let model = random_model(&mut r, 4, 2, 2, 0.1);
        let b_in = unit_rows(&mut r, 3, 4);
        let b_all = unit_rows(&mut r, 3, 4);
        let variant = if disjoint { LossVariant::Disjoint } else { LossVariant::Focal };
        let cfg = LossConfig { variant, lambda: 0.3, gamma: 2.0 };
        let bd = loss(&model, &b_in, &b_all, &cfg).unwrap();
        prop_assert!((bd.total - (bd.in_term + bd.out_term)).abs() <= 1e-9 * bd.total.abs().max(1e-300));
    }

    #[test]
    fn halving_temperature_sharpens(seed in any::<u64>(), tau in 0.05f64..2.0) {
        let mut r = rng(seed);
        let task = task_from_rows(6, unit_rows(&mut r, 1, 6));
        let w = unit_rows(&mut r, 1, 6);
        let x = unit_rows(&mut r, 1, 6);
        let at = |t: f64| {
            let m = DetectorModel::new(task.clone(), w.clone(), t).unwrap();
            predict_out_probability(&m, &x).unwrap()
        };
        let (p, sharper) = (at(tau), at(tau / 2.0));
        if p > 0.5 {
            prop_assert!(sharper >= p, "{sharper} < {p}");
            if sharper < 1.0 { prop_assert!(sharper > p); }
        } else if p < 0.5 {
            prop_assert!(sharper <= p);
            if sharper > 0.0 { prop_assert!(sharper < p); }
        }
    }
}

#[test]
fn sharpening_can_fail_with_several_trainable_embeddings() {
    // two equal out logits outweigh a slightly larger in logit only while
    // the temperature is high
    let task = task_from_rows(2, vec![1.0, 0.0]);
    let x = [0.8, 0.6];
    // unit w with x.w = 0.7 < x.t = 0.8
    let s = (1.0f64 - 0.49).sqrt();
    let row = [0.8 * 0.7 + 0.6 * s, 0.6 * 0.7 - 0.8 * s];
    let w = [row, row].concat();
    let at = |t: f64| {
        let m = DetectorModel::new(task.clone(), w.clone(), t).unwrap();
        predict_out_probability(&m, &x).unwrap()
    };
    let p = at(0.5);
    assert!(p > 0.5);
    assert!(at(0.25) < p);
}
