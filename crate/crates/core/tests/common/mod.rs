#![allow(dead_code)]

use hftt_core::objective::{loss_and_gradient, loss_with_weights};
use hftt_core::trainer::{seeded_rng, Rng64};
use hftt_core::{DetectorModel, LossConfig, LossVariant, TaskEmbeddings};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> Rng64 {
    seeded_rng(seed)
}

pub fn unit_rows(rng: &mut Rng64, n: usize, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.extend(v.iter().map(|x| x / norm));
    }
    out
}

pub fn task_from_rows(dim: usize, rows: Vec<f64>) -> TaskEmbeddings {
    let k = rows.len() / dim;
    TaskEmbeddings::new(dim, (0..k).map(|i| format!("t{i}")).collect(), rows).unwrap()
}

pub fn random_model(rng: &mut Rng64, dim: usize, k: usize, n: usize, tau: f64) -> DetectorModel {
    let task = task_from_rows(dim, unit_rows(rng, k, dim));
    DetectorModel::new(task, unit_rows(rng, n, dim), tau).unwrap()
}

/// Central differences of the loss total with the sample weights held fixed.
pub fn finite_difference_gradient(
    model: &DetectorModel,
    batch_in: &[f64],
    batch_all: &[f64],
    cfg: &LossConfig,
    weights: &[f64],
    step: f64,
) -> Vec<f64> {
    let base = model.trainable().to_vec();
    (0..base.len())
        .map(|i| {
            let mut plus = base.clone();
            plus[i] += step;
            let mut minus = base.clone();
            minus[i] -= step;
            let f = |w: Vec<f64>| {
                let m = model.with_trainable(w).unwrap();
                loss_with_weights(&m, batch_in, batch_all, cfg, weights)
                    .unwrap()
                    .total
            };
            (f(plus) - f(minus)) / (2.0 * step)
        })
        .collect()
}

/// Largest entrywise difference relative to the largest entry of the reference.
pub fn max_relative_error(analytic: &[f64], reference: &[f64]) -> f64 {
    let scale = reference
        .iter()
        .chain(analytic)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    analytic
        .iter()
        .zip(reference)
        .map(|(a, f)| (a - f).abs())
        .fold(0.0, f64::max)
        / scale
}

/// AUROC by enumerating every (ood, id) pair.
pub fn pair_count_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut doubled: u64 = 0;
    for &o in ood {
        for &i in id {
            doubled += if o > i {
                2
            } else if o == i {
                1
            } else {
                0
            };
        }
    }
    doubled as f64 / (2 * id.len() * ood.len()) as f64
}

/// Scans every candidate threshold from the top down.
pub fn brute_force_fpr(id: &[f64], ood: &[f64], tpr: f64) -> (f64, f64) {
    let mut candidates = ood.to_vec();
    candidates.sort_by(|a, b| b.total_cmp(a));
    candidates.dedup();
    let n = ood.len() as f64;
    let t = candidates
        .into_iter()
        .find(|&t| ood.iter().filter(|&&s| s >= t).count() as f64 / n >= tpr)
        .unwrap();
    let fpr = id.iter().filter(|&&s| s >= t).count() as f64 / id.len() as f64;
    (fpr, t)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub const GAMMAS: [f64; 4] = [0.0, 1.0, 2.0, 3.0];
pub const LAMBDAS: [f64; 3] = [0.0, 0.5, 1.0];

pub struct Instance {
    pub model: DetectorModel,
    pub batch_in: Vec<f64>,
    pub batch_all: Vec<f64>,
    pub cfg: LossConfig,
}

/// Random instance with d <= 16, K, N <= 8, batches <= 8; the seed cycles
/// through every variant, gamma and lambda combination.
pub fn random_instance(seed: u64) -> Instance {
    let mut r = rng(seed);
    let dim = r.random_range(2..=16);
    let k = r.random_range(1..=8);
    let n = r.random_range(1..=8);
    let tau = 10f64.powf(r.random_range(-1.3..0.0));
    let model = random_model(&mut r, dim, k, n, tau);
    let b_in = r.random_range(1..=8);
    let b_all = r.random_range(1..=8);
    let cfg = LossConfig {
        gamma: GAMMAS[seed as usize % 4],
        lambda: LAMBDAS[(seed as usize / 4) % 3],
        variant: if (seed / 12).is_multiple_of(2) {
            LossVariant::Focal
        } else {
            LossVariant::Disjoint
        },
    };
    Instance {
        batch_in: unit_rows(&mut r, b_in, dim),
        batch_all: unit_rows(&mut r, b_all, dim),
        model,
        cfg,
    }
}

/// Checks the analytic gradient against finite differences on `count`
/// clamp-free instances. Returns the worst error and the number of distinct
/// (variant, gamma, lambda) combinations covered.
pub fn gradient_check(count: usize) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut seed = 0;
    let mut covered = std::collections::HashSet::new();
    while checked < count {
        let inst = random_instance(seed);
        seed += 1;
        let (breakdown, grad) =
            loss_and_gradient(&inst.model, &inst.batch_in, &inst.batch_all, &inst.cfg).unwrap();
        if breakdown.clamp_events > 0 {
            continue;
        }
        let fd = finite_difference_gradient(
            &inst.model,
            &inst.batch_in,
            &inst.batch_all,
            &inst.cfg,
            &breakdown.focal_weights,
            1e-6,
        );
        worst = worst.max(max_relative_error(&grad, &fd));
        covered.insert((
            inst.cfg.variant == LossVariant::Focal,
            inst.cfg.gamma as u8,
            (inst.cfg.lambda * 2.0) as u8,
        ));
        checked += 1;
    }
    (worst, covered.len())
}
