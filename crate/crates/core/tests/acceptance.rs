//! Acceptance gate: one line per criterion, non-zero exit on any failure.
//! Run with `cargo test -p hftt-core --test acceptance`.

mod common;

use std::fs;
use std::time::{Duration, Instant};

use common::*;
use hftt_core::embedding::encode_store;
use hftt_core::theory::{cosine, empirical_mean, transfer_fixture};
use hftt_core::{
    auroc, closed_form_classifier, eval_report, fit_quadratic_classifier, focal_weights,
    fpr_at_tpr, load_model, load_store, sample_bimodal, save_model, save_store, score_hftt, train,
    verify_corollary, BimodalConfig, EmbeddingStore, Modality, TrainConfig,
};
use rand::Rng;

const THEOREM_CONFIGS: usize = 20;
const THEOREM_MIN_COSINE: f64 = 0.999;
const THEOREM_BUDGET: Duration = Duration::from_secs(30);
const MAX_NOISE: f64 = 0.3;
const MIN_SAMPLES: usize = 5_000;
const MIN_MARGIN: f64 = 0.2;
const COROLLARY_BUDGET: Duration = Duration::from_secs(10);
const GRADIENT_INSTANCES: usize = 100;
const GRADIENT_MAX_REL_ERROR: f64 = 1e-5;
const FOCAL_BATCHES: usize = 1_000;
const FOCAL_SUM_REL_TOL: f64 = 1e-9;
const METRIC_INSTANCES: usize = 1_000;
const METRIC_MAX_N: usize = 500;
const TRANSFER_MIN_AUROC: f64 = 0.95;
const TRANSFER_SEED: u64 = 42;
const TRANSFER_BUDGET: Duration = Duration::from_secs(60);

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn theorem_configs(seed: u64) -> Vec<BimodalConfig> {
    let mut r = rng(seed);
    (0..THEOREM_CONFIGS)
        .map(|i| {
            let dim = [8, 32, 64][i % 3];
            let noise = r.random_range(0.05..=MAX_NOISE);
            BimodalConfig::random(&mut r, dim, MIN_SAMPLES, noise, MIN_MARGIN).unwrap()
        })
        .collect()
}

fn theorem_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst = f64::INFINITY;
    for cfg in theorem_configs(1) {
        let s = sample_bimodal(&cfg).unwrap();
        let fit = fit_quadratic_classifier(&s.u_minus, &s.u_plus, 5_000, 0.5).unwrap();
        let closed = closed_form_classifier(
            &empirical_mean(&s.u_minus).unwrap(),
            &empirical_mean(&s.u_plus).unwrap(),
        )
        .unwrap();
        worst = worst.min(cosine(&fit.theta, &closed));
    }
    let elapsed = start.elapsed();
    outcome(
        worst >= THEOREM_MIN_COSINE && elapsed < THEOREM_BUDGET,
        format!("min cosine {worst:.7} over {THEOREM_CONFIGS} configs, {elapsed:.2?}"),
    )
}

fn corollary_transfer() -> Outcome {
    let start = Instant::now();
    let mut held = 0;
    let configs = theorem_configs(2);
    for cfg in &configs {
        let (a, b) = cfg.margins();
        assert!(a >= MIN_MARGIN && b >= MIN_MARGIN);
        let s = sample_bimodal(cfg).unwrap();
        let fit = fit_quadratic_classifier(&s.u_minus, &s.u_plus, 5_000, 0.5).unwrap();
        if verify_corollary(&fit.theta, &s.v_minus, &s.v_plus)
            .unwrap()
            .holds
        {
            held += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        held == configs.len() && elapsed < COROLLARY_BUDGET,
        format!("holds on {held}/{} configs, {elapsed:.2?}", configs.len()),
    )
}

fn gradient() -> Outcome {
    let (worst, covered) = gradient_check(GRADIENT_INSTANCES);
    outcome(
        worst <= GRADIENT_MAX_REL_ERROR && covered == 24,
        format!("max relative error {worst:.2e}, {covered}/24 loss settings"),
    )
}

fn focal_identities() -> Outcome {
    let mut r = rng(3);
    let mut worst_sum: f64 = 0.0;
    let mut uniform = true;
    for _ in 0..FOCAL_BATCHES {
        let n = r.random_range(1..=256);
        let probs: Vec<f64> = (0..n).map(|_| r.random_range(1e-12..1.0)).collect();
        let gamma = r.random_range(0.0..5.0);
        let sum: f64 = focal_weights(&probs, gamma).unwrap().iter().sum();
        worst_sum = worst_sum.max((sum - n as f64).abs() / n as f64);
        uniform &= focal_weights(&probs, 0.0)
            .unwrap()
            .iter()
            .all(|&b| b == 1.0);
    }
    outcome(
        worst_sum <= FOCAL_SUM_REL_TOL && uniform,
        format!("worst sum deviation {worst_sum:.2e}, gamma 0 uniform: {uniform}"),
    )
}

fn metric_oracle() -> Outcome {
    let mut r = rng(4);
    let mut mismatches = 0;
    for i in 0..METRIC_INSTANCES {
        let levels = if i % 2 == 0 {
            r.random_range(1..25)
        } else {
            u32::MAX
        };
        let n_id = r.random_range(1..=METRIC_MAX_N);
        let n_ood = r.random_range(1..=METRIC_MAX_N);
        let mut draw = |n| {
            (0..n)
                .map(|_| f64::from(r.random_range(0..levels)))
                .collect::<Vec<_>>()
        };
        let id = draw(n_id);
        let ood = draw(n_ood);
        if auroc(&id, &ood).unwrap() != pair_count_auroc(&id, &ood) {
            mismatches += 1;
        }
    }
    let ood: Vec<f64> = (1..=20).map(f64::from).collect();
    let f = fpr_at_tpr(&[0.0, 1.0, 2.0, 3.0], &ood, 0.95).unwrap();
    outcome(
        mismatches == 0 && f.fpr == 0.5 && f.threshold == 2.0,
        format!(
            "{mismatches} AUROC mismatches in {METRIC_INSTANCES}; fpr {} at threshold {}",
            f.fpr, f.threshold
        ),
    )
}

fn reference_config() -> TrainConfig {
    TrainConfig {
        batch_size: 256,
        learning_rate: 1.0,
        epochs: 1,
        gamma: 1.0,
        lambda: 0.0,
        n_trainable: 10,
        temperature: Some(0.01),
        seed: TRANSFER_SEED,
        ..TrainConfig::default()
    }
}

fn end_to_end_transfer() -> Outcome {
    let start = Instant::now();
    let cfg = BimodalConfig::default_fixture(64, 10_000, 0.3, TRANSFER_SEED).unwrap();
    let fx = transfer_fixture(&sample_bimodal(&cfg).unwrap(), TRANSFER_SEED).unwrap();
    let run = |lr: f64| {
        let tc = TrainConfig {
            learning_rate: lr,
            ..reference_config()
        };
        let model = train(&tc, &fx.task, &fx.in_texts, &fx.corpus)
            .unwrap()
            .final_model;
        let id = score_hftt(&model, &fx.id_images).unwrap();
        let ood = score_hftt(&model, &fx.ood_images).unwrap();
        (model, eval_report(&id, &ood, ("V-", "V+")).unwrap())
    };
    let (model, trained) = run(1.0);
    let (model_again, again) = run(1.0);
    let (_, untrained) = run(0.0);
    let elapsed = start.elapsed();
    let deterministic = model == model_again && trained == again;
    outcome(
        trained.auroc >= TRANSFER_MIN_AUROC
            && trained.auroc > untrained.auroc
            && deterministic
            && elapsed < TRANSFER_BUDGET,
        format!(
            "AUROC {:.4} (untrained {:.4}), FPR95 {:.4}, deterministic: {deterministic}, {elapsed:.2?}",
            trained.auroc, untrained.auroc, trained.fpr_at_95_tpr
        ),
    )
}

fn determinism_and_frozen_backbone() -> Outcome {
    let cfg = BimodalConfig::default_fixture(32, 2_000, 0.3, 9).unwrap();
    let fx = transfer_fixture(&sample_bimodal(&cfg).unwrap(), 9).unwrap();
    let before = (
        fx.task.clone(),
        encode_store(&fx.in_texts),
        encode_store(&fx.corpus),
    );
    let tc = TrainConfig {
        batch_size: 64,
        epochs: 2,
        ..reference_config()
    };
    let runs: Vec<_> = (0..3)
        .map(|_| train(&tc, &fx.task, &fx.in_texts, &fx.corpus).unwrap())
        .collect();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let identical = runs.windows(2).all(|w| {
        bits(w[0].final_model.trainable()) == bits(w[1].final_model.trainable())
            && bits(&w[0].loss_trace) == bits(&w[1].loss_trace)
    });
    let frozen = fx.task == before.0
        && encode_store(&fx.in_texts) == before.1
        && encode_store(&fx.corpus) == before.2
        && runs.iter().all(|r| r.final_model.task() == &before.0);
    outcome(
        identical && frozen,
        format!("bit-identical runs: {identical}, inputs unchanged: {frozen}"),
    )
}

fn format_round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(6);
    let store =
        EmbeddingStore::from_unit_rows(12, &unit_rows(&mut r, 40, 12), 0.07, Modality::Image)
            .unwrap()
            .with_labels((0..40).map(|i| format!("img {i}")).collect())
            .unwrap();
    let path = dir.path().join("x.hemb");
    save_store(&store, &path).unwrap();
    let store_ok = load_store(&path).unwrap() == store;

    let cfg = BimodalConfig::default_fixture(12, 300, 0.3, 1).unwrap();
    let fx = transfer_fixture(&sample_bimodal(&cfg).unwrap(), 1).unwrap();
    let tc = reference_config();
    let model = train(&tc, &fx.task, &fx.in_texts, &fx.corpus)
        .unwrap()
        .final_model;
    let model_dir = dir.path().join("model");
    save_model(&model, &model_dir, Some(&tc)).unwrap();
    let model_ok = load_model(&model_dir).unwrap() == model;

    let bytes = fs::read(&path).unwrap();
    let mut bad = bytes.clone();
    bad[3] = b'X';
    let bad_path = dir.path().join("bad.hemb");
    fs::write(&bad_path, &bad).unwrap();
    let magic_rejected = load_store(&bad_path).is_err();
    let truncated_rejected = (0..bytes.len()).all(|len| {
        fs::write(&bad_path, &bytes[..len]).unwrap();
        load_store(&bad_path).is_err()
    });
    outcome(
        store_ok && model_ok && magic_rejected && truncated_rejected,
        format!(
            "store {store_ok}, model {model_ok}, bad magic rejected {magic_rejected}, \
             every truncation rejected {truncated_rejected}"
        ),
    )
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("theorem oracle", theorem_oracle),
        ("corollary transfer", corollary_transfer),
        ("gradient check", gradient),
        ("focal identities", focal_identities),
        ("metric oracle", metric_oracle),
        ("end-to-end transfer", end_to_end_transfer),
        (
            "determinism and frozen backbone",
            determinism_and_frozen_backbone,
        ),
        ("format round-trips", format_round_trips),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
