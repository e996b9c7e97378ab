//! Regression and sentiment-classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc7: f64,
    pub acc2: f64,
    pub f1: f64,
    pub mae: f64,
    pub corr: f64,
    /// Set when predictions or labels have zero variance and `corr` was
    /// reported as 0.
    pub corr_undefined: bool,
    pub count: usize,
}

/// Nearest integer, clamped to the 7 sentiment classes.
pub fn sentiment_class(v: f64) -> i32 {
    v.round().clamp(-3.0, 3.0) as i32
}

/// Zero counts as positive.
pub fn is_positive(v: f64) -> bool {
    v >= 0.0
}

pub fn compute(preds: &[f64], labels: &[f64]) -> Result<MetricsReport> {
    if preds.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty split".into()));
    }
    let n = preds.len() as f64;
    let pairs = || preds.iter().copied().zip(labels.iter().copied());

    let acc7 = pairs()
        .filter(|&(p, y)| sentiment_class(p) == sentiment_class(y))
        .count() as f64
        / n;
    let acc2 = pairs()
        .filter(|&(p, y)| is_positive(p) == is_positive(y))
        .count() as f64
        / n;

    let tp = pairs().filter(|&(p, y)| is_positive(p) && is_positive(y)).count() as f64;
    let fp = pairs().filter(|&(p, y)| is_positive(p) && !is_positive(y)).count() as f64;
    let fneg = pairs().filter(|&(p, y)| !is_positive(p) && is_positive(y)).count() as f64;
    let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fneg) };

    let mae = pairs().map(|(p, y)| (p - y).abs()).sum::<f64>() / n;

    let mp = preds.iter().sum::<f64>() / n;
    let my = labels.iter().sum::<f64>() / n;
    let cov: f64 = pairs().map(|(p, y)| (p - mp) * (y - my)).sum();
    let vp: f64 = preds.iter().map(|p| (p - mp).powi(2)).sum();
    let vy: f64 = labels.iter().map(|y| (y - my).powi(2)).sum();
    let (corr, corr_undefined) = if vp > 0.0 && vy > 0.0 {
        ((cov / (vp.sqrt() * vy.sqrt())).clamp(-1.0, 1.0), false)
    } else {
        (0.0, true)
    };

    Ok(MetricsReport {
        acc7,
        acc2,
        f1,
        mae,
        corr,
        corr_undefined,
        count: preds.len(),
    })
}
