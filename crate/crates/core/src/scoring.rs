//! Per-sample detection scores. Every method reports "higher = more
//! out-distribution" so metrics never need to negate.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embedding::{dot, l2_norm, write_text_atomic, EmbeddingStore, TaskEmbeddings};
use crate::error::{Error, Result};
use crate::objective::{DetectorModel, SampleMasses};

pub const SCORE_CONVENTION: &str = "higher=more-out-distribution";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMethod {
    Hftt,
    Msp,
    MaxLogit,
    Energy,
    Mcm,
}

impl ScoreMethod {
    pub const ALL: [ScoreMethod; 5] = [
        ScoreMethod::Hftt,
        ScoreMethod::Msp,
        ScoreMethod::MaxLogit,
        ScoreMethod::Energy,
        ScoreMethod::Mcm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreMethod::Hftt => "hftt",
            ScoreMethod::Msp => "msp",
            ScoreMethod::MaxLogit => "maxlogit",
            ScoreMethod::Energy => "energy",
            ScoreMethod::Mcm => "mcm",
        }
    }

    /// Smallest number of task embeddings the method is defined for.
    pub fn min_tasks(self) -> usize {
        match self {
            ScoreMethod::Msp | ScoreMethod::Mcm => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for ScoreMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScoreMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown score method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    /// `None` when read from a bare CSV without metadata.
    pub method: Option<ScoreMethod>,
    pub scores: Vec<f64>,
    pub ids: Vec<String>,
}

impl ScoreSet {
    pub fn new(method: Option<ScoreMethod>, scores: Vec<f64>, ids: Vec<String>) -> Result<Self> {
        if scores.len() != ids.len() {
            return Err(Error::validation(format!(
                "{} scores for {} ids",
                scores.len(),
                ids.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("score for {:?}", ids[i])));
        }
        Ok(ScoreSet {
            method,
            scores,
            ids,
        })
    }

    pub fn convention(&self) -> &'static str {
        SCORE_CONVENTION
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// HFTT score: the out-distribution probability of every row of `x`.
pub fn score_hftt(model: &DetectorModel, x: &EmbeddingStore) -> Result<ScoreSet> {
    if x.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            actual: x.dim(),
        });
    }
    let scores = (0..x.count())
        .map(|i| SampleMasses::compute(model, &x.row_f64(i)).out_prob())
        .collect();
    ScoreSet::new(Some(ScoreMethod::Hftt), scores, x.ids())
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|s| (s - m).exp()).sum::<f64>().ln()
}

fn max_softmax(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    1.0 / logits.iter().map(|s| (s - m).exp()).sum::<f64>()
}

/// Training-free baseline score of one embedding against the task embeddings.
///
/// Logits are `x.w_i / temperature`; `mcm` first scales `x` to unit length
/// (task embeddings are unit already), the others use raw inner products.
pub fn baseline_score(
    method: ScoreMethod,
    task: &TaskEmbeddings,
    x: &[f64],
    temperature: f64,
) -> Result<f64> {
    if task.len() < method.min_tasks() {
        return Err(Error::validation(format!(
            "{method} needs at least {} task embeddings, got {}",
            method.min_tasks(),
            task.len()
        )));
    }
    if x.len() != task.dim() {
        return Err(Error::DimensionMismatch {
            expected: task.dim(),
            actual: x.len(),
        });
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::validation(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let logits: Vec<f64> = match method {
        ScoreMethod::Mcm => {
            let xn = l2_norm(x);
            task.rows().map(|w| dot(x, w) / xn / temperature).collect()
        }
        _ => task.rows().map(|w| dot(x, w) / temperature).collect(),
    };
    Ok(match method {
        ScoreMethod::Msp | ScoreMethod::Mcm => 1.0 - max_softmax(&logits),
        ScoreMethod::MaxLogit => -logits.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ScoreMethod::Energy => -log_sum_exp(&logits),
        ScoreMethod::Hftt => {
            return Err(Error::validation(
                "hftt is not a baseline; it needs a trained model",
            ))
        }
    })
}

pub fn score_baseline(
    method: ScoreMethod,
    task: &TaskEmbeddings,
    x: &EmbeddingStore,
    temperature: f64,
) -> Result<ScoreSet> {
    // Validate once even for an empty store.
    if method == ScoreMethod::Hftt || task.len() < method.min_tasks() {
        baseline_score(method, task, &vec![0.0; task.dim()], 1.0)?;
    }
    if x.dim() != task.dim() {
        return Err(Error::DimensionMismatch {
            expected: task.dim(),
            actual: x.dim(),
        });
    }
    // rows of a normalized store are unit by contract; mcm then equals msp
    let as_scored = match method {
        ScoreMethod::Mcm if x.normalized() => ScoreMethod::Msp,
        m => m,
    };
    let scores = (0..x.count())
        .map(|i| baseline_score(as_scored, task, &x.row_f64(i), temperature))
        .collect::<Result<Vec<_>>>()?;
    ScoreSet::new(Some(method), scores, x.ids())
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreMeta {
    method: Option<ScoreMethod>,
    convention: String,
    count: usize,
}

/// `<path>.meta.json`, written next to every exported CSV.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Writes `id,score` rows with scores at 17 significant digits.
pub fn export_scores(set: &ScoreSet, path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    wtr.write_record(["id", "score"]).map_err(csv_err)?;
    for (id, s) in set.ids.iter().zip(&set.scores) {
        wtr.write_record([id.as_str(), &format!("{s:.16e}")])
            .map_err(csv_err)?;
    }
    let bytes = wtr
        .into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?;
    let text = String::from_utf8(bytes).expect("csv output is utf-8");
    write_text_atomic(path, &text)?;

    let meta = ScoreMeta {
        method: set.method,
        convention: SCORE_CONVENTION.to_owned(),
        count: set.len(),
    };
    let mpath = meta_path(path);
    let json = serde_json::to_string_pretty(&meta).map_err(|source| Error::Json {
        path: mpath.clone(),
        source,
    })?;
    write_text_atomic(&mpath, &(json + "\n"))
}

/// Reads an `id,score` CSV, picking up the method from its metadata sidecar
/// when one exists.
pub fn read_scores(path: &Path) -> Result<ScoreSet> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = rdr.headers().map_err(csv_err)?.clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "score"] {
        return Err(Error::validation(format!(
            "{}: header must be \"id,score\"",
            path.display()
        )));
    }
    let mut ids = Vec::new();
    let mut scores = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let score: f64 = rec[1].trim().parse().map_err(|_| {
            Error::validation(format!(
                "{}: row {}: bad score {:?}",
                path.display(),
                line + 1,
                &rec[1]
            ))
        })?;
        ids.push(rec[0].to_owned());
        scores.push(score);
    }

    let mpath = meta_path(path);
    let method = if mpath.exists() {
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let meta: ScoreMeta = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: mpath.clone(),
            source,
        })?;
        if meta.convention != SCORE_CONVENTION {
            return Err(Error::validation(format!(
                "{}: unsupported score convention {:?}",
                mpath.display(),
                meta.convention
            )));
        }
        meta.method
    } else {
        None
    };
    ScoreSet::new(method, scores, ids)
}
