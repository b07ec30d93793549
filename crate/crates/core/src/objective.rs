//! Out-distribution probability, the focal-weighted training loss and its
//! gradient with respect to the trainable embeddings.
//!
//! For an embedding `x`, with task embeddings `w_in` and trainable embeddings
//! `w_out` at temperature `tau`:
//!
//! ```text
//! p(x) = sum_j exp(x.w_out_j / tau) / (sum_i exp(x.w_in_i / tau) + sum_j exp(x.w_out_j / tau))
//! ```
//!
//! The default objective over an in-distribution batch `B_in` and a batch `B`
//! drawn from all data is
//!
//! ```text
//! sum_{x in B_in} -log(1 - p(x)) + (1 - lambda) sum_{x in B} beta_x * -log p(x)
//! beta_x = |B| alpha_x / sum_k alpha_k,   alpha_x = (1 - p(x))^gamma
//! ```
//!
//! Focal weights are treated as constants when differentiating.

use serde::{Deserialize, Serialize};

use crate::embedding::{dot, snap_to_f32, TaskEmbeddings, UNIT_NORM_TOLERANCE};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_EPSILON, 1 - PROB_EPSILON]` before logs.
pub const PROB_EPSILON: f64 = 1e-12;

/// Task embeddings, trainable embeddings and temperature: the whole detector.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    task: TaskEmbeddings,
    trainable: Vec<f64>,
    temperature: f64,
}

impl DetectorModel {
    pub fn new(task: TaskEmbeddings, trainable: Vec<f64>, temperature: f64) -> Result<Self> {
        let dim = task.dim();
        if trainable.is_empty() || !trainable.len().is_multiple_of(dim) {
            return Err(Error::validation(format!(
                "{} trainable values do not form rows of dimension {dim}",
                trainable.len()
            )));
        }
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::validation(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        if trainable.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("trainable embeddings".into()));
        }
        Ok(DetectorModel {
            task,
            trainable,
            temperature,
        })
    }

    pub fn dim(&self) -> usize {
        self.task.dim()
    }

    pub fn task(&self) -> &TaskEmbeddings {
        &self.task
    }

    pub fn num_task(&self) -> usize {
        self.task.len()
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable.len() / self.dim()
    }

    pub fn trainable(&self) -> &[f64] {
        &self.trainable
    }

    pub fn trainable_row(&self, j: usize) -> &[f64] {
        let d = self.dim();
        &self.trainable[j * d..(j + 1) * d]
    }

    pub(crate) fn trainable_mut(&mut self) -> &mut [f64] {
        &mut self.trainable
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn with_trainable(&self, trainable: Vec<f64>) -> Result<Self> {
        if trainable.len() != self.trainable.len() {
            return Err(Error::validation(format!(
                "expected {} trainable values, got {}",
                self.trainable.len(),
                trainable.len()
            )));
        }
        DetectorModel::new(self.task.clone(), trainable, self.temperature)
    }

    /// Rounds the trainable embeddings to `f32`, the precision models persist at.
    pub fn quantized(&self) -> Self {
        let mut m = self.clone();
        snap_to_f32(&mut m.trainable);
        m
    }

    /// Largest deviation of any trainable embedding from unit norm.
    pub fn max_trainable_norm_error(&self) -> f64 {
        self.trainable
            .chunks_exact(self.dim())
            .map(|r| (dot(r, r).sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input embedding".into()));
        }
        Ok(())
    }

    pub(crate) fn trainable_unit(&self) -> bool {
        self.max_trainable_norm_error() <= UNIT_NORM_TOLERANCE
    }
}

/// Softmax masses of one sample, shifted by the maximum logit.
#[derive(Debug, Clone)]
pub(crate) struct SampleMasses {
    /// `exp(x.w_out_j / tau - m)` per trainable embedding.
    pub out_exp: Vec<f64>,
    pub in_sum: f64,
    pub out_sum: f64,
}

impl SampleMasses {
    pub fn compute(model: &DetectorModel, x: &[f64]) -> Self {
        let tau = model.temperature;
        let in_logits: Vec<f64> = model.task.rows().map(|w| dot(x, w) / tau).collect();
        let out_logits: Vec<f64> = model
            .trainable
            .chunks_exact(model.dim())
            .map(|w| dot(x, w) / tau)
            .collect();
        let m = in_logits
            .iter()
            .chain(&out_logits)
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let in_sum = in_logits.iter().map(|l| (l - m).exp()).sum();
        let out_exp: Vec<f64> = out_logits.iter().map(|l| (l - m).exp()).collect();
        let out_sum = out_exp.iter().sum();
        SampleMasses {
            out_exp,
            in_sum,
            out_sum,
        }
    }

    /// `p(x)`.
    pub fn out_prob(&self) -> f64 {
        self.out_sum / (self.in_sum + self.out_sum)
    }

    /// `1 - p(x)` without cancellation.
    pub fn in_prob(&self) -> f64 {
        self.in_sum / (self.in_sum + self.out_sum)
    }
}

/// Probability that `x` is out-distribution.
pub fn predict_out_probability(model: &DetectorModel, x: &[f64]) -> Result<f64> {
    model.check_input(x)?;
    Ok(SampleMasses::compute(model, x).out_prob())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    /// In-distribution term plus focal-weighted cross-entropy over all data.
    #[default]
    Focal,
    /// Classic weighted cross-entropy; the second batch must hold only
    /// out-distribution samples.
    Disjoint,
}

impl std::str::FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "focal" => Ok(LossVariant::Focal),
            "disjoint" => Ok(LossVariant::Disjoint),
            other => Err(Error::validation(format!(
                "unknown loss variant {other:?} (expected focal or disjoint)"
            ))),
        }
    }
}

impl std::fmt::Display for LossVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossVariant::Focal => "focal",
            LossVariant::Disjoint => "disjoint",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub variant: LossVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.0,
            gamma: 1.0,
            variant: LossVariant::Focal,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::validation(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::validation(format!(
                "gamma must be non-negative, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub in_term: f64,
    pub out_term: f64,
    /// `p(x)` for each row of the in-distribution batch.
    pub in_probs: Vec<f64>,
    /// `p(x)` for each row of the all-data batch.
    pub out_probs: Vec<f64>,
    /// Weight applied to each row of the all-data batch.
    pub focal_weights: Vec<f64>,
    /// Number of probabilities that hit the clamp.
    pub clamp_events: usize,
}

fn focal_from_complements(complements: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if complements.is_empty() {
        return Err(Error::validation("focal weights need a non-empty batch"));
    }
    let alpha: Vec<f64> = complements.iter().map(|c| c.powf(gamma)).collect();
    let sum: f64 = alpha.iter().sum();
    if !(sum > 0.0) {
        return Err(Error::Degenerate(
            "every sample has p(x) = 1; focal weights are undefined".into(),
        ));
    }
    let n = alpha.len() as f64;
    Ok(alpha.iter().map(|a| n * a / sum).collect())
}

/// `beta_j = n * alpha_j / sum_k alpha_k` with `alpha_j = (1 - p_j)^gamma`.
pub fn focal_weights(probs: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::validation(format!(
            "gamma must be non-negative, got {gamma}"
        )));
    }
    if let Some(p) = probs.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
        return Err(Error::validation(format!("probability {p} outside (0, 1]")));
    }
    let complements: Vec<f64> = probs.iter().map(|p| 1.0 - p).collect();
    focal_from_complements(&complements, gamma)
}

fn batch_rows(batch: &[f64], dim: usize, what: &str) -> Result<usize> {
    if batch.is_empty() {
        return Err(Error::validation(format!("{what} batch is empty")));
    }
    if !batch.len().is_multiple_of(dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: batch.len() % dim,
        });
    }
    if batch.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what} batch")));
    }
    Ok(batch.len() / dim)
}

/// `-ln(max(prob, eps))`, counting clamp hits.
fn clamped_nll(prob: f64, clamps: &mut usize) -> (f64, bool) {
    if prob < PROB_EPSILON {
        *clamps += 1;
        (-PROB_EPSILON.ln(), true)
    } else {
        (-prob.ln(), false)
    }
}

fn evaluate(
    model: &DetectorModel,
    batch_in: &[f64],
    batch_all: &[f64],
    cfg: &LossConfig,
    fixed_weights: Option<&[f64]>,
    mut grad: Option<&mut [f64]>,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let dim = model.dim();
    batch_rows(batch_in, dim, "in-distribution")?;
    let n_all = batch_rows(batch_all, dim, "all-data")?;
    let tau = model.temperature;

    let in_masses: Vec<SampleMasses> = batch_in
        .chunks_exact(dim)
        .map(|x| SampleMasses::compute(model, x))
        .collect();
    let all_masses: Vec<SampleMasses> = batch_all
        .chunks_exact(dim)
        .map(|x| SampleMasses::compute(model, x))
        .collect();

    let weights = match (fixed_weights, cfg.variant) {
        (Some(w), _) => {
            if w.len() != n_all {
                return Err(Error::validation(format!(
                    "{} fixed weights for {n_all} samples",
                    w.len()
                )));
            }
            w.to_vec()
        }
        (None, LossVariant::Focal) => {
            let complements: Vec<f64> = all_masses.iter().map(SampleMasses::in_prob).collect();
            focal_from_complements(&complements, cfg.gamma)?
        }
        (None, LossVariant::Disjoint) => vec![1.0; n_all],
    };

    let in_scale = match cfg.variant {
        LossVariant::Focal => 1.0,
        LossVariant::Disjoint => cfg.lambda,
    };
    let out_scale = 1.0 - cfg.lambda;

    let mut clamps = 0;
    let mut in_term = 0.0;
    for (x, m) in batch_in.chunks_exact(dim).zip(&in_masses) {
        let (nll, clamped) = clamped_nll(m.in_prob(), &mut clamps);
        in_term += in_scale * nll;
        if let (Some(g), false) = (grad.as_deref_mut(), clamped) {
            // d(-log(1-p))/dw_j = (x / tau) q_j
            let total = m.in_sum + m.out_sum;
            for (j, e) in m.out_exp.iter().enumerate() {
                let coef = in_scale * e / total / tau;
                axpy(&mut g[j * dim..(j + 1) * dim], coef, x);
            }
        }
    }

    let mut out_term = 0.0;
    for ((x, m), beta) in batch_all.chunks_exact(dim).zip(&all_masses).zip(&weights) {
        let (nll, clamped) = clamped_nll(m.out_prob(), &mut clamps);
        let w = out_scale * beta;
        out_term += w * nll;
        if let (Some(g), false) = (grad.as_deref_mut(), clamped) {
            // d(-log p)/dw_j = (x / tau)(q_j - r_j) = -(x / tau) r_j (1 - p)
            let complement = m.in_prob();
            for (j, e) in m.out_exp.iter().enumerate() {
                let r = e / m.out_sum;
                let coef = -w * r * complement / tau;
                axpy(&mut g[j * dim..(j + 1) * dim], coef, x);
            }
        }
    }

    Ok(LossBreakdown {
        total: in_term + out_term,
        in_term,
        out_term,
        in_probs: in_masses.iter().map(SampleMasses::out_prob).collect(),
        out_probs: all_masses.iter().map(SampleMasses::out_prob).collect(),
        focal_weights: weights,
        clamp_events: clamps,
    })
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Loss over an in-distribution batch and an all-data batch (row-major,
/// `model.dim()` columns each).
pub fn loss(
    model: &DetectorModel,
    batch_in: &[f64],
    batch_all: &[f64],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    evaluate(model, batch_in, batch_all, cfg, None, None)
}

/// Same as [`loss`] but with the all-data sample weights supplied instead of
/// derived from the current model.
pub fn loss_with_weights(
    model: &DetectorModel,
    batch_in: &[f64],
    batch_all: &[f64],
    cfg: &LossConfig,
    weights: &[f64],
) -> Result<LossBreakdown> {
    evaluate(model, batch_in, batch_all, cfg, Some(weights), None)
}

/// Gradient of the loss total with respect to the trainable embeddings,
/// `num_trainable x dim` row-major.
pub fn loss_gradient(
    model: &DetectorModel,
    batch_in: &[f64],
    batch_all: &[f64],
    cfg: &LossConfig,
) -> Result<Vec<f64>> {
    loss_and_gradient(model, batch_in, batch_all, cfg).map(|(_, g)| g)
}

pub fn loss_and_gradient(
    model: &DetectorModel,
    batch_in: &[f64],
    batch_all: &[f64],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let mut grad = vec![0.0; model.trainable.len()];
    let breakdown = evaluate(model, batch_in, batch_all, cfg, None, Some(&mut grad))?;
    Ok((breakdown, grad))
}
