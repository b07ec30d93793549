//! Two-class, two-mode data on the unit sphere.
//!
//! Class means `u_-1, u_+1` (mode U, "text") and `v_-1, v_+1` (mode V,
//! "image") are aligned so that `u_+1.v_+1 > u_+1.v_-1` and
//! `u_-1.v_+1 < u_-1.v_-1`. The cosine classifier minimizing the quadratic
//! loss `(1 - y theta.u)^2` on the U sets is `(u_+1 - u_-1) / |u_+1 - u_-1|`,
//! and it separates the V sets in expectation.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::embedding::{
    dot, l2_norm, EmbeddingStore, Modality, TaskEmbeddings, DEFAULT_TEMPERATURE,
};
use crate::error::{Error, Result};
use crate::trainer::{seeded_rng, Rng64};

/// Steps without loss improvement after which a fit is declared stalled.
pub const STALL_WINDOW: usize = 100;

pub const DEFAULT_FIT_STEPS: usize = 5_000;
pub const DEFAULT_FIT_LR: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BimodalConfig {
    pub dim: usize,
    pub samples_per_class: usize,
    pub mean_u_minus: Vec<f64>,
    pub mean_u_plus: Vec<f64>,
    pub mean_v_minus: Vec<f64>,
    pub mean_v_plus: Vec<f64>,
    /// Scale of the isotropic Gaussian perturbation applied before renormalizing.
    pub noise_scale: f64,
    pub seed: u64,
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = l2_norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

const FIXTURE_CLASS_COSINE: f64 = 0.2;
const FIXTURE_CONTRAST: f64 = 0.6;
const FIXTURE_MODALITY_OFFSET: f64 = 0.3;

fn axis(dim: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[i] = 1.0;
    v
}

fn gaussian_unit(rng: &mut Rng64, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if l2_norm(&v) > 1e-6 {
            return unit(v);
        }
    }
}

impl BimodalConfig {
    /// Class means `u₋ = e0` and `u₊ = 0.2 e0 + √0.96 e1`. Each V mean is its
    /// U mean pushed away from the other class by 0.6 of their difference,
    /// offset by a shared `0.3 e2`, and renormalized.
    pub fn default_fixture(
        dim: usize,
        samples_per_class: usize,
        noise_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        if dim < 3 {
            return Err(Error::validation("the default fixture needs dim >= 3"));
        }
        let u_minus = axis(dim, 0);
        let mut u_plus = vec![0.0; dim];
        u_plus[0] = FIXTURE_CLASS_COSINE;
        u_plus[1] = (1.0 - FIXTURE_CLASS_COSINE * FIXTURE_CLASS_COSINE).sqrt();
        let image_mean = |own: &[f64], other: &[f64]| {
            let mut v: Vec<f64> = own
                .iter()
                .zip(other)
                .map(|(a, b)| a + FIXTURE_CONTRAST * (a - b))
                .collect();
            v[2] += FIXTURE_MODALITY_OFFSET;
            unit(v)
        };
        let cfg = BimodalConfig {
            dim,
            samples_per_class,
            mean_v_minus: image_mean(&u_minus, &u_plus),
            mean_v_plus: image_mean(&u_plus, &u_minus),
            mean_u_minus: u_minus,
            mean_u_plus: u_plus,
            noise_scale,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Random means whose alignment margins are at least `min_margin`.
    pub fn random(
        rng: &mut Rng64,
        dim: usize,
        samples_per_class: usize,
        noise_scale: f64,
        min_margin: f64,
    ) -> Result<Self> {
        if dim < 2 {
            return Err(Error::validation("dim must be at least 2"));
        }
        for _ in 0..10_000 {
            let u_minus = gaussian_unit(rng, dim);
            let u_plus = gaussian_unit(rng, dim);
            let gap = gaussian_unit(rng, dim);
            let gap_scale = rng.random_range(0.2..1.0);
            let mut v_of = |u: &[f64]| {
                let jitter = gaussian_unit(rng, dim);
                unit(
                    u.iter()
                        .zip(&gap)
                        .zip(&jitter)
                        .map(|((a, g), j)| a + gap_scale * g + 0.3 * j)
                        .collect(),
                )
            };
            let v_minus = v_of(&u_minus);
            let v_plus = v_of(&u_plus);
            let seed = rng.random();
            let cfg = BimodalConfig {
                dim,
                samples_per_class,
                mean_u_minus: u_minus,
                mean_u_plus: u_plus,
                mean_v_minus: v_minus,
                mean_v_plus: v_plus,
                noise_scale,
                seed,
            };
            let (m_plus, m_minus) = cfg.margins();
            if m_plus >= min_margin
                && m_minus >= min_margin
                && l2_norm(&sub(&cfg.mean_u_plus, &cfg.mean_u_minus)) > 1e-3
            {
                cfg.validate()?;
                return Ok(cfg);
            }
        }
        Err(Error::validation(format!(
            "no configuration with margin {min_margin} found in dim {dim}"
        )))
    }

    /// `(u_+1.v_+1 - u_+1.v_-1, u_-1.v_-1 - u_-1.v_+1)`.
    pub fn margins(&self) -> (f64, f64) {
        (
            dot(&self.mean_u_plus, &self.mean_v_plus) - dot(&self.mean_u_plus, &self.mean_v_minus),
            dot(&self.mean_u_minus, &self.mean_v_minus)
                - dot(&self.mean_u_minus, &self.mean_v_plus),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.samples_per_class == 0 {
            return Err(Error::validation(
                "dim and samples_per_class must be positive",
            ));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::validation(format!(
                "noise_scale must be non-negative, got {}",
                self.noise_scale
            )));
        }
        for (name, m) in [
            ("u_minus", &self.mean_u_minus),
            ("u_plus", &self.mean_u_plus),
            ("v_minus", &self.mean_v_minus),
            ("v_plus", &self.mean_v_plus),
        ] {
            if m.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    actual: m.len(),
                });
            }
            let n = l2_norm(m);
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::validation(format!(
                    "mean {name} has norm {n}, expected 1"
                )));
            }
        }
        let (m_plus, m_minus) = self.margins();
        if !(m_plus > 0.0 && m_minus > 0.0) {
            return Err(Error::validation(format!(
                "means violate the cross-modal alignment inequalities (margins {m_plus}, {m_minus})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BimodalSample {
    pub u_minus: EmbeddingStore,
    pub u_plus: EmbeddingStore,
    pub v_minus: EmbeddingStore,
    pub v_plus: EmbeddingStore,
}

fn sample_around(
    rng: &mut Rng64,
    mean: &[f64],
    count: usize,
    noise: f64,
    modality: Modality,
) -> Result<EmbeddingStore> {
    let dim = mean.len();
    let mut rows = Vec::with_capacity(count * dim);
    let mut point = vec![0.0; dim];
    for _ in 0..count {
        loop {
            for (p, m) in point.iter_mut().zip(mean) {
                let z: f64 = rng.sample(StandardNormal);
                *p = m + noise * z;
            }
            let n = l2_norm(&point);
            if n > 1e-12 {
                rows.extend(point.iter().map(|p| p / n));
                break;
            }
        }
    }
    EmbeddingStore::from_unit_rows(dim, &rows, DEFAULT_TEMPERATURE, modality)
}

/// Each point is `normalize(mean + noise_scale * z)`, `z` standard normal.
/// Sets are drawn in the order U-, U+, V-, V+ from one seeded generator.
pub fn sample_bimodal(cfg: &BimodalConfig) -> Result<BimodalSample> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed);
    let n = cfg.samples_per_class;
    let s = cfg.noise_scale;
    Ok(BimodalSample {
        u_minus: sample_around(&mut rng, &cfg.mean_u_minus, n, s, Modality::Text)?,
        u_plus: sample_around(&mut rng, &cfg.mean_u_plus, n, s, Modality::Text)?,
        v_minus: sample_around(&mut rng, &cfg.mean_v_minus, n, s, Modality::Image)?,
        v_plus: sample_around(&mut rng, &cfg.mean_v_plus, n, s, Modality::Image)?,
    })
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (l2_norm(a) * l2_norm(b))
}

/// Arithmetic mean of the rows (not renormalized).
pub fn empirical_mean(store: &EmbeddingStore) -> Result<Vec<f64>> {
    if store.is_empty() {
        return Err(Error::validation("mean of an empty store"));
    }
    let mut mean = vec![0.0; store.dim()];
    for row in store.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += f64::from(*v);
        }
    }
    let n = store.count() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// `(u_+1 - u_-1) / |u_+1 - u_-1|`.
pub fn closed_form_classifier(u_minus: &[f64], u_plus: &[f64]) -> Result<Vec<f64>> {
    if u_minus.len() != u_plus.len() {
        return Err(Error::DimensionMismatch {
            expected: u_minus.len(),
            actual: u_plus.len(),
        });
    }
    let d = sub(u_plus, u_minus);
    let n = l2_norm(&d);
    if !(n > 1e-12) {
        return Err(Error::Degenerate("class means coincide".into()));
    }
    Ok(d.iter().map(|x| x / n).collect())
}

/// Mean vector and second-moment matrix of a store; enough to evaluate the
/// quadratic loss and its gradient in `O(dim^2)`.
struct Moments {
    mean: Vec<f64>,
    second: Vec<f64>,
}

impl Moments {
    fn of(store: &EmbeddingStore) -> Result<Self> {
        let d = store.dim();
        let mean = empirical_mean(store)?;
        let mut second = vec![0.0; d * d];
        let mut row = vec![0.0; d];
        for r in store.rows() {
            for (x, v) in row.iter_mut().zip(r) {
                *x = f64::from(*v);
            }
            for i in 0..d {
                let ri = row[i];
                let line = &mut second[i * d..(i + 1) * d];
                for j in i..d {
                    line[j] += ri * row[j];
                }
            }
        }
        let n = store.count() as f64;
        for i in 0..d {
            for j in i..d {
                let v = second[i * d + j] / n;
                second[i * d + j] = v;
                second[j * d + i] = v;
            }
        }
        Ok(Moments { mean, second })
    }

    fn quad(&self, theta: &[f64]) -> f64 {
        let d = theta.len();
        self.second
            .chunks_exact(d)
            .zip(theta)
            .map(|(row, t)| t * dot(row, theta))
            .sum()
    }

    fn mat_vec(&self, theta: &[f64]) -> Vec<f64> {
        self.second
            .chunks_exact(theta.len())
            .map(|row| dot(row, theta))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadraticFit {
    pub theta: Vec<f64>,
    pub loss_trace: Vec<f64>,
    pub converged: bool,
}

fn quadratic_loss(minus: &Moments, plus: &Moments, theta: &[f64]) -> f64 {
    // E(1 + t.u)^2 over U-1 plus E(1 - t.u)^2 over U+1
    2.0 + 2.0 * dot(theta, &minus.mean) - 2.0 * dot(theta, &plus.mean)
        + minus.quad(theta)
        + plus.quad(theta)
}

fn quadratic_grad(minus: &Moments, plus: &Moments, theta: &[f64]) -> Vec<f64> {
    let a = minus.mat_vec(theta);
    let b = plus.mat_vec(theta);
    (0..theta.len())
        .map(|i| 2.0 * (minus.mean[i] - plus.mean[i] + a[i] + b[i]))
        .collect()
}

/// Starting point: the normalized overall mean, which is orthogonal to the
/// optimum for balanced classes, or a basis vector orthogonalized against the
/// mean difference when the overall mean vanishes.
fn initial_theta(minus: &[f64], plus: &[f64]) -> Vec<f64> {
    let s: Vec<f64> = minus.iter().zip(plus).map(|(a, b)| a + b).collect();
    if l2_norm(&s) > 1e-8 {
        return unit(s);
    }
    let diff = sub(plus, minus);
    let dim = diff.len();
    let dn = l2_norm(&diff).max(f64::MIN_POSITIVE);
    let k = (0..dim)
        .min_by(|&i, &j| diff[i].abs().total_cmp(&diff[j].abs()))
        .unwrap_or(0);
    let mut e = axis(dim, k);
    let proj = diff[k] / (dn * dn);
    for (x, d) in e.iter_mut().zip(&diff) {
        *x -= proj * d;
    }
    if l2_norm(&e) > 1e-8 {
        unit(e)
    } else {
        axis(dim, k)
    }
}

/// Minimizes the empirical quadratic loss over unit `theta` by projected
/// gradient descent (a gradient step followed by renormalization).
pub fn fit_quadratic_classifier(
    u_minus: &EmbeddingStore,
    u_plus: &EmbeddingStore,
    steps: usize,
    lr: f64,
) -> Result<QuadraticFit> {
    if u_minus.dim() != u_plus.dim() {
        return Err(Error::DimensionMismatch {
            expected: u_minus.dim(),
            actual: u_plus.dim(),
        });
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::validation(format!(
            "learning rate must be non-negative, got {lr}"
        )));
    }
    let minus = Moments::of(u_minus)?;
    let plus = Moments::of(u_plus)?;
    let mut theta = initial_theta(&minus.mean, &plus.mean);
    let mut best = quadratic_loss(&minus, &plus, &theta);
    let mut trace = vec![best];
    if steps == 0 || lr == 0.0 {
        return Ok(QuadraticFit {
            theta,
            loss_trace: trace,
            converged: false,
        });
    }

    let mut stalled = 0;
    let mut converged = false;
    for _ in 0..steps {
        let g = quadratic_grad(&minus, &plus, &theta);
        let radial = dot(&g, &theta);
        let tangential = g
            .iter()
            .zip(&theta)
            .map(|(gi, ti)| (gi - radial * ti).powi(2))
            .sum::<f64>()
            .sqrt();
        if tangential <= 1e-12 {
            converged = true;
            break;
        }
        let next = unit(theta.iter().zip(&g).map(|(t, gi)| t - lr * gi).collect());
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("classifier update".into()));
        }
        theta = next;
        let l = quadratic_loss(&minus, &plus, &theta);
        trace.push(l);
        if l < best {
            best = l;
            stalled = 0;
        } else {
            stalled += 1;
            if stalled >= STALL_WINDOW {
                if tangential <= 1e-6 {
                    converged = true;
                    break;
                }
                return Err(Error::NonConvergence {
                    window: STALL_WINDOW,
                    last_loss: l,
                    trace,
                });
            }
        }
    }
    Ok(QuadraticFit {
        theta,
        loss_trace: trace,
        converged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorollaryReport {
    pub mean_minus: f64,
    pub mean_plus: f64,
    pub holds: bool,
}

fn mean_projection(theta: &[f64], store: &EmbeddingStore) -> Result<f64> {
    if store.dim() != theta.len() {
        return Err(Error::DimensionMismatch {
            expected: theta.len(),
            actual: store.dim(),
        });
    }
    Ok(dot(theta, &empirical_mean(store)?))
}

/// Checks `mean(theta.v) < 0` over `v_minus` and `> 0` over `v_plus`.
pub fn verify_corollary(
    theta: &[f64],
    v_minus: &EmbeddingStore,
    v_plus: &EmbeddingStore,
) -> Result<CorollaryReport> {
    let mean_minus = mean_projection(theta, v_minus)?;
    let mean_plus = mean_projection(theta, v_plus)?;
    Ok(CorollaryReport {
        mean_minus,
        mean_plus,
        holds: mean_minus < 0.0 && 0.0 < mean_plus,
    })
}

/// Fraction of V samples on the correct side of the hyperplane `theta.v = 0`.
pub fn sign_accuracy(theta: &[f64], v_minus: &EmbeddingStore, v_plus: &EmbeddingStore) -> f64 {
    let proj = |r: &[f32]| {
        r.iter()
            .zip(theta)
            .map(|(a, b)| f64::from(*a) * b)
            .sum::<f64>()
    };
    let right = v_minus.rows().filter(|r| proj(r) < 0.0).count()
        + v_plus.rows().filter(|r| proj(r) > 0.0).count();
    right as f64 / (v_minus.count() + v_plus.count()) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryReport {
    pub dim: usize,
    pub samples_per_class: usize,
    pub noise_scale: f64,
    pub seed: u64,
    pub theta_closed: Vec<f64>,
    pub theta_fitted: Vec<f64>,
    pub cosine: f64,
    pub fit_converged: bool,
    pub corollary: CorollaryReport,
    pub accuracy: f64,
}

/// Default fixture, closed form on the empirical U means, fitted classifier,
/// and the transfer check on the V sets.
pub fn run_theory(
    dim: usize,
    samples_per_class: usize,
    noise_scale: f64,
    seed: u64,
) -> Result<(TheoryReport, BimodalSample)> {
    let cfg = BimodalConfig::default_fixture(dim, samples_per_class, noise_scale, seed)?;
    let sample = sample_bimodal(&cfg)?;
    let closed = closed_form_classifier(
        &empirical_mean(&sample.u_minus)?,
        &empirical_mean(&sample.u_plus)?,
    )?;
    let fit = fit_quadratic_classifier(
        &sample.u_minus,
        &sample.u_plus,
        DEFAULT_FIT_STEPS,
        DEFAULT_FIT_LR,
    )?;
    let corollary = verify_corollary(&fit.theta, &sample.v_minus, &sample.v_plus)?;
    let report = TheoryReport {
        dim,
        samples_per_class,
        noise_scale,
        seed,
        cosine: cosine(&closed, &fit.theta),
        accuracy: sign_accuracy(&fit.theta, &sample.v_minus, &sample.v_plus),
        theta_closed: closed,
        theta_fitted: fit.theta,
        fit_converged: fit.converged,
        corollary,
    };
    Ok((report, sample))
}

/// Training and evaluation inputs built from a sample: U sets act as text,
/// V sets as held-out images, and the U₋ class is in-distribution.
#[derive(Debug, Clone)]
pub struct TransferFixture {
    /// Normalized empirical mean of U₋, named `in`.
    pub task: TaskEmbeddings,
    pub in_texts: EmbeddingStore,
    /// U₋ ∪ U₊ in a seeded random order.
    pub corpus: EmbeddingStore,
    pub id_images: EmbeddingStore,
    pub ood_images: EmbeddingStore,
}

pub fn transfer_fixture(sample: &BimodalSample, shuffle_seed: u64) -> Result<TransferFixture> {
    let task = TaskEmbeddings::new(
        sample.u_minus.dim(),
        vec!["in".to_owned()],
        unit(empirical_mean(&sample.u_minus)?),
    )?;
    let joined = sample.u_minus.concat(&sample.u_plus)?;
    let mut order: Vec<usize> = (0..joined.count()).collect();
    order.shuffle(&mut seeded_rng(shuffle_seed));
    Ok(TransferFixture {
        task,
        in_texts: sample.u_minus.clone(),
        corpus: joined.select(&order)?,
        id_images: sample.v_minus.clone(),
        ood_images: sample.v_plus.clone(),
    })
}
