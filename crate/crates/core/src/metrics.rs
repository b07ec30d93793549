//! AUROC and FPR at a fixed TPR. The positive class is out-distribution:
//! a higher score means "more likely unwanted".

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scoring::{ScoreSet, SCORE_CONVENTION};

fn check_scores(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::validation(
            "both in- and out-distribution score lists must be non-empty",
        ));
    }
    if id.iter().chain(ood).any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    Ok(())
}

/// Twice the number of (ood, id) pairs with `ood > id`, plus the tied pairs.
/// Exact integer arithmetic.
fn doubled_pair_wins(id: &[f64], ood: &[f64]) -> u128 {
    let mut id_sorted = id.to_vec();
    id_sorted.sort_by(f64::total_cmp);
    let mut wins: u128 = 0;
    for &s in ood {
        let below = id_sorted.partition_point(|&v| v < s);
        let not_above = id_sorted.partition_point(|&v| v <= s);
        wins += 2 * below as u128 + (not_above - below) as u128;
    }
    wins
}

/// `P(s_ood > s_id) + P(s_ood = s_id) / 2` over all pairs, in `O(n log n)`.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_scores(id_scores, ood_scores)?;
    let pairs = 2 * id_scores.len() as u128 * ood_scores.len() as u128;
    Ok(doubled_pair_wins(id_scores, ood_scores) as f64 / pairs as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FprAtTpr {
    pub fpr: f64,
    pub threshold: f64,
}

/// Threshold is the largest observed out-distribution score `t` with
/// `|{ood >= t}| / |ood| >= tpr`; `fpr = |{id >= t}| / |id|`.
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], tpr: f64) -> Result<FprAtTpr> {
    check_scores(id_scores, ood_scores)?;
    if !(tpr > 0.0 && tpr <= 1.0) {
        return Err(Error::validation(format!(
            "tpr must lie in (0, 1], got {tpr}"
        )));
    }
    let mut ood = ood_scores.to_vec();
    ood.sort_by(|a, b| b.total_cmp(a));
    let n_ood = ood.len() as f64;
    let mut threshold = ood[ood.len() - 1];
    let mut i = 0;
    while i < ood.len() {
        let t = ood[i];
        // include every tie of t
        while i < ood.len() && ood[i] == t {
            i += 1;
        }
        if i as f64 / n_ood >= tpr {
            threshold = t;
            break;
        }
    }
    let above = id_scores.iter().filter(|&&s| s >= threshold).count();
    Ok(FprAtTpr {
        fpr: above as f64 / id_scores.len() as f64,
        threshold,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub auroc: f64,
    pub fpr_at_95_tpr: f64,
    pub n_in: usize,
    pub n_out: usize,
    pub threshold: f64,
    pub method: String,
    pub pair: (String, String),
    pub positive_class: &'static str,
    pub convention: &'static str,
}

impl EvalReport {
    /// `FPR  AUROC` in percent with two decimals.
    pub fn render_row(&self) -> String {
        format!(
            "{:<12} {:<24} {:>8.2} {:>8.2}",
            self.method,
            format!("{} vs {}", self.pair.0, self.pair.1),
            100.0 * self.fpr_at_95_tpr,
            100.0 * self.auroc
        )
    }

    pub fn render_header() -> String {
        format!(
            "{:<12} {:<24} {:>8} {:>8}",
            "method", "pair", "FPR", "AUROC"
        )
    }
}

pub fn eval_report(id: &ScoreSet, ood: &ScoreSet, pair: (&str, &str)) -> Result<EvalReport> {
    let method = match (id.method, ood.method) {
        (Some(a), Some(b)) if a != b => {
            return Err(Error::validation(format!(
                "score sets come from different methods ({a} vs {b})"
            )))
        }
        (a, b) => a
            .or(b)
            .map_or_else(|| "unknown".to_owned(), |m| m.to_string()),
    };
    let auc = auroc(&id.scores, &ood.scores)?;
    let fpr = fpr_at_tpr(&id.scores, &ood.scores, 0.95)?;
    Ok(EvalReport {
        auroc: auc,
        fpr_at_95_tpr: fpr.fpr,
        n_in: id.len(),
        n_out: ood.len(),
        threshold: fpr.threshold,
        method,
        pair: (pair.0.to_owned(), pair.1.to_owned()),
        positive_class: "out-distribution",
        convention: SCORE_CONVENTION,
    })
}
