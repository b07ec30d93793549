use std::fs;
use std::path::Path;
use std::str::FromStr;

use clap::Args;
use hftt_core::{Error, InitScheme, LossVariant, Result, TrainConfig};

pub const SEED_ENV: &str = "HFTT_SEED";

/// Every training setting, each optional so that flags, a config file, the
/// environment and the built-in defaults can be layered.
#[derive(Debug, Clone, Default, PartialEq, Args)]
pub struct TrainSettings {
    /// Corpus rows per step [reference default: 256]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// SGD step size [reference default: 1.0]
    #[arg(long = "lr", visible_alias = "learning-rate")]
    pub learning_rate: Option<f64>,
    /// Passes over the corpus [reference default: 1]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Number of trainable embeddings N [reference default: 10]
    #[arg(long, short = 'N')]
    pub n_trainable: Option<usize>,
    /// Weight moved from the all-data term to the in-distribution term, in [0, 1] [reference default: 0]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Focal exponent, >= 0 [reference default: 1.0]
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Random seed; falls back to $HFTT_SEED [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Rescale trainable embeddings to unit norm after each step [default: true]
    #[arg(long)]
    pub renormalize: Option<bool>,
    /// Objective: focal or disjoint [default: focal]
    #[arg(long)]
    pub loss_variant: Option<LossVariant>,
    /// Initialization: random_unit or corpus_mean_perturbed [default: random_unit]
    #[arg(long)]
    pub init: Option<InitScheme>,
    /// Visit the corpus in a seeded random order [default: true]
    #[arg(long)]
    pub shuffle: Option<bool>,
    /// Softmax temperature [default: the corpus store's temperature, normally 0.01]
    #[arg(long)]
    pub temperature: Option<f64>,
}

fn parse<T: FromStr>(path: &Path, line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::validation(format!(
            "{}:{line}: invalid value {value:?} for {key}",
            path.display()
        ))
    })
}

impl TrainSettings {
    /// Parses `key = value` lines; `#` starts a comment. Unknown or repeated
    /// keys are errors.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut s = TrainSettings::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::validation(format!("{}:{n}: expected key = value", path.display()))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key.to_owned()) {
                return Err(Error::validation(format!(
                    "{}:{n}: {key} set twice",
                    path.display()
                )));
            }
            seen.push(key.to_owned());
            match key {
                "batch_size" => s.batch_size = Some(parse(path, n, key, value)?),
                "learning_rate" => s.learning_rate = Some(parse(path, n, key, value)?),
                "epochs" => s.epochs = Some(parse(path, n, key, value)?),
                "n_trainable" => s.n_trainable = Some(parse(path, n, key, value)?),
                "lambda" => s.lambda = Some(parse(path, n, key, value)?),
                "gamma" => s.gamma = Some(parse(path, n, key, value)?),
                "seed" => s.seed = Some(parse(path, n, key, value)?),
                "renormalize" => s.renormalize = Some(parse(path, n, key, value)?),
                "loss_variant" => s.loss_variant = Some(parse(path, n, key, value)?),
                "init" => s.init = Some(parse(path, n, key, value)?),
                "shuffle" => s.shuffle = Some(parse(path, n, key, value)?),
                "temperature" => s.temperature = Some(parse(path, n, key, value)?),
                other => {
                    return Err(Error::validation(format!(
                        "{}:{n}: unknown key {other:?}",
                        path.display()
                    )))
                }
            }
        }
        Ok(s)
    }

    /// Values set here win over `fallback`.
    pub fn or(self, fallback: TrainSettings) -> TrainSettings {
        TrainSettings {
            batch_size: self.batch_size.or(fallback.batch_size),
            learning_rate: self.learning_rate.or(fallback.learning_rate),
            epochs: self.epochs.or(fallback.epochs),
            n_trainable: self.n_trainable.or(fallback.n_trainable),
            lambda: self.lambda.or(fallback.lambda),
            gamma: self.gamma.or(fallback.gamma),
            seed: self.seed.or(fallback.seed),
            renormalize: self.renormalize.or(fallback.renormalize),
            loss_variant: self.loss_variant.or(fallback.loss_variant),
            init: self.init.or(fallback.init),
            shuffle: self.shuffle.or(fallback.shuffle),
            temperature: self.temperature.or(fallback.temperature),
        }
    }

    pub fn resolve(self, env_seed: Option<u64>) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            epochs: self.epochs.unwrap_or(d.epochs),
            n_trainable: self.n_trainable.unwrap_or(d.n_trainable),
            lambda: self.lambda.unwrap_or(d.lambda),
            gamma: self.gamma.unwrap_or(d.gamma),
            seed: self.seed.or(env_seed).unwrap_or(d.seed),
            renormalize: self.renormalize.unwrap_or(d.renormalize),
            loss_variant: self.loss_variant.unwrap_or(d.loss_variant),
            init: self.init.unwrap_or(d.init),
            shuffle: self.shuffle.unwrap_or(d.shuffle),
            temperature: self.temperature.or(d.temperature),
        }
    }
}

/// `$HFTT_SEED`, if set.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::validation(format!("{SEED_ENV}={v:?} is not a seed"))),
        Err(_) => Ok(None),
    }
}
