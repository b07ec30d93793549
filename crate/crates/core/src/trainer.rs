//! Training loop: only the trainable embeddings move; task embeddings and the
//! input stores stay frozen.

use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::{
    dot, load_store, save_store, write_text_atomic, EmbeddingStore, Modality, TaskEmbeddings,
};
use crate::error::{Error, Result};
use crate::objective::{loss_and_gradient, DetectorModel, LossConfig, LossVariant};

/// Corpus rows averaged by [`InitScheme::CorpusMeanPerturbed`].
pub const INIT_SAMPLE_SIZE: usize = 1_000;
/// Gaussian noise scale added to the corpus mean by [`InitScheme::CorpusMeanPerturbed`].
pub const INIT_NOISE_SCALE: f64 = 0.1;

pub type Rng64 = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Isotropic Gaussian draws, renormalized.
    #[default]
    RandomUnit,
    /// Mean of a random corpus sample plus Gaussian noise, renormalized.
    CorpusMeanPerturbed,
}

impl std::str::FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_unit" => Ok(InitScheme::RandomUnit),
            "corpus_mean_perturbed" => Ok(InitScheme::CorpusMeanPerturbed),
            other => Err(Error::validation(format!(
                "unknown init scheme {other:?} (expected random_unit or corpus_mean_perturbed)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub n_trainable: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub seed: u64,
    pub renormalize: bool,
    pub loss_variant: LossVariant,
    pub init: InitScheme,
    /// Visit the corpus in a seeded random order each epoch.
    pub shuffle: bool,
    /// Overrides the corpus store's temperature.
    pub temperature: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            learning_rate: 1.0,
            epochs: 1,
            n_trainable: 10,
            lambda: 0.0,
            gamma: 1.0,
            seed: 0,
            renormalize: true,
            loss_variant: LossVariant::Focal,
            init: InitScheme::RandomUnit,
            shuffle: true,
            temperature: None,
        }
    }
}

impl TrainConfig {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            gamma: self.gamma,
            variant: self.loss_variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.n_trainable == 0 {
            return Err(Error::validation(
                "batch_size, epochs and n_trainable must be positive",
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if let Some(t) = self.temperature {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::validation(format!(
                    "temperature must be positive, got {t}"
                )));
            }
        }
        self.loss_config().validate()
    }

    /// Optimizer steps for a corpus of `corpus_count` rows.
    pub fn steps_for(&self, corpus_count: usize) -> usize {
        corpus_count.div_ceil(self.batch_size) * self.epochs
    }
}

fn renormalize_rows(rows: &mut [f64], dim: usize) -> Result<()> {
    for (j, row) in rows.chunks_exact_mut(dim).enumerate() {
        let norm = dot(row, row).sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Degenerate(format!(
                "trainable embedding {j} has norm {norm}"
            )));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(())
}

fn init_with_rng(
    rng: &mut Rng64,
    n: usize,
    dim: usize,
    init: InitScheme,
    corpus: Option<&EmbeddingStore>,
) -> Result<Vec<f64>> {
    if n == 0 || dim == 0 {
        return Err(Error::validation("n and dim must be positive"));
    }
    let mut out: Vec<f64> = match init {
        InitScheme::RandomUnit => (0..n * dim).map(|_| rng.sample(StandardNormal)).collect(),
        InitScheme::CorpusMeanPerturbed => {
            let corpus = corpus.filter(|c| !c.is_empty()).ok_or_else(|| {
                Error::validation("corpus_mean_perturbed needs a non-empty corpus")
            })?;
            if corpus.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: corpus.dim(),
                });
            }
            let take = INIT_SAMPLE_SIZE.min(corpus.count());
            let mut picked: Vec<usize> = index::sample(rng, corpus.count(), take).into_vec();
            picked.sort_unstable();
            let mut mean = vec![0.0; dim];
            for &i in &picked {
                for (m, v) in mean.iter_mut().zip(corpus.row(i)) {
                    *m += f64::from(*v);
                }
            }
            mean.iter_mut().for_each(|m| *m /= take as f64);
            (0..n * dim)
                .map(|i| {
                    let z: f64 = rng.sample(StandardNormal);
                    mean[i % dim] + INIT_NOISE_SCALE * z
                })
                .collect()
        }
    };
    renormalize_rows(&mut out, dim)?;
    Ok(out)
}

/// Initial trainable embeddings, `n x dim` row-major; deterministic per seed.
///
/// `corpus` is only read by [`InitScheme::CorpusMeanPerturbed`].
pub fn init_trainable(
    n: usize,
    dim: usize,
    seed: u64,
    init: InitScheme,
    corpus: Option<&EmbeddingStore>,
) -> Result<Vec<f64>> {
    init_with_rng(&mut seeded_rng(seed), n, dim, init, corpus)
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps: usize,
    pub loss_trace: Vec<f64>,
    pub clamp_events: usize,
    /// Largest deviation from unit norm of any trainable embedding after any
    /// step (0 when renormalization is off).
    pub max_step_norm_error: f64,
    pub config: TrainConfig,
    pub final_model: DetectorModel,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    steps: usize,
    clamp_events: usize,
    final_loss: Option<f64>,
    loss_trace: &'a [f64],
    config: &'a TrainConfig,
}

impl TrainReport {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(ReportJson {
            steps: self.steps,
            clamp_events: self.clamp_events,
            final_loss: self.loss_trace.last().copied(),
            loss_trace: &self.loss_trace,
            config: &self.config,
        })
        .expect("report serializes")
    }
}

fn gather_rows(store: &EmbeddingStore, indices: &[usize], out: &mut Vec<f64>) {
    out.clear();
    for &i in indices {
        out.extend(store.row(i).iter().map(|&v| f64::from(v)));
    }
}

/// Runs SGD over the corpus. For every corpus batch an in-distribution batch
/// of the same size is drawn with replacement. The returned model's
/// trainable embeddings are rounded to `f32`.
pub fn train(
    cfg: &TrainConfig,
    task: &TaskEmbeddings,
    in_texts: &EmbeddingStore,
    corpus: &EmbeddingStore,
) -> Result<TrainReport> {
    train_with_observer(cfg, task, in_texts, corpus, |_, _| {})
}

/// [`train`], calling `observe(step, model)` after every update.
pub fn train_with_observer<F>(
    cfg: &TrainConfig,
    task: &TaskEmbeddings,
    in_texts: &EmbeddingStore,
    corpus: &EmbeddingStore,
    mut observe: F,
) -> Result<TrainReport>
where
    F: FnMut(usize, &DetectorModel),
{
    cfg.validate()?;
    let dim = task.dim();
    for store in [in_texts, corpus] {
        if store.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: store.dim(),
            });
        }
        if store.modality() == Modality::Image {
            warn!("training on an image-modality store; expected text embeddings");
        }
    }
    if corpus.is_empty() {
        return Err(Error::validation("corpus is empty"));
    }
    if in_texts.is_empty() {
        return Err(Error::validation("in-distribution texts are empty"));
    }
    let temperature = cfg
        .temperature
        .unwrap_or_else(|| f64::from(corpus.temperature()));
    let loss_cfg = cfg.loss_config();

    let mut rng = seeded_rng(cfg.seed);
    let init = init_with_rng(&mut rng, cfg.n_trainable, dim, cfg.init, Some(corpus))?;
    let mut model = DetectorModel::new(task.clone(), init, temperature)?;

    let mut order: Vec<usize> = (0..corpus.count()).collect();
    let mut loss_trace = Vec::with_capacity(cfg.steps_for(corpus.count()));
    let mut clamp_events = 0;
    let mut max_norm_error: f64 = 0.0;
    let mut batch_all = Vec::new();
    let mut batch_in = Vec::new();
    let mut in_idx = Vec::with_capacity(cfg.batch_size);

    for _ in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let step = loss_trace.len();
            in_idx.clear();
            in_idx.extend((0..chunk.len()).map(|_| rng.random_range(0..in_texts.count())));
            gather_rows(corpus, chunk, &mut batch_all);
            gather_rows(in_texts, &in_idx, &mut batch_in);

            let (breakdown, grad) = loss_and_gradient(&model, &batch_in, &batch_all, &loss_cfg)?;
            if !breakdown.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { step });
            }
            let w = model.trainable_mut();
            for (wi, gi) in w.iter_mut().zip(&grad) {
                *wi -= cfg.learning_rate * gi;
            }
            if cfg.renormalize {
                renormalize_rows(w, dim).map_err(|_| Error::NonFiniteLoss { step })?;
                max_norm_error = max_norm_error.max(model.max_trainable_norm_error());
            }
            loss_trace.push(breakdown.total);
            clamp_events += breakdown.clamp_events;
            observe(step, &model);
        }
    }

    Ok(TrainReport {
        steps: loss_trace.len(),
        loss_trace,
        clamp_events,
        max_step_norm_error: max_norm_error,
        config: cfg.clone(),
        final_model: model.quantized(),
    })
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TASK_FILE: &str = "task.hemb";
pub const TRAINABLE_FILE: &str = "trainable.hemb";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub dim: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub temperature: f64,
    pub created_by: String,
    #[serde(default)]
    pub config: Option<TrainConfig>,
}

/// Writes `manifest.json`, `task.hemb` and `trainable.hemb` into `dir`.
/// Embeddings persist at `f32`; the manifest is written last.
pub fn save_model(model: &DetectorModel, dir: &Path, config: Option<&TrainConfig>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tau32 = model.temperature() as f32;
    save_store(&model.task().to_store(tau32)?, &dir.join(TASK_FILE))?;
    let trainable = EmbeddingStore::new(
        model.dim(),
        model.trainable().iter().map(|&v| v as f32).collect(),
        model.trainable_unit(),
        tau32,
        Modality::Synthetic,
    )?;
    save_store(&trainable, &dir.join(TRAINABLE_FILE))?;
    let manifest = ModelManifest {
        dim: model.dim(),
        k: model.num_task(),
        n: model.num_trainable(),
        temperature: model.temperature(),
        created_by: concat!("hftt-core ", env!("CARGO_PKG_VERSION")).to_owned(),
        config: config.cloned(),
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    write_text_atomic(&path, &(json + "\n"))
}

pub fn load_manifest(dir: &Path) -> Result<ModelManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path, source })
}

pub fn load_model(dir: &Path) -> Result<DetectorModel> {
    let manifest = load_manifest(dir)?;
    let task_store = load_store(&dir.join(TASK_FILE))?;
    let trainable = load_store(&dir.join(TRAINABLE_FILE))?;
    let check = |what: &str, manifest: usize, actual: usize| {
        if manifest == actual {
            Ok(())
        } else {
            Err(Error::validation(format!(
                "manifest {what} = {manifest} but files hold {actual}"
            )))
        }
    };
    check("K", manifest.k, task_store.count())?;
    check("N", manifest.n, trainable.count())?;
    check("dim", manifest.dim, task_store.dim())?;
    check("dim", manifest.dim, trainable.dim())?;
    let task = TaskEmbeddings::from_store(&task_store)?;
    DetectorModel::new(task, trainable.to_f64(), manifest.temperature)
}
