//! Evaluation math: Gini impurity, ROC-AUC, distribution summaries and the
//! R² to AUC effect-size conversion.
//!
//! Everything here is pure and safe to call from any thread.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Low,
    High,
}

impl Label {
    /// Outcomes at or above the threshold are high.
    #[inline]
    pub fn from_outcome(outcome: f64, threshold: f64) -> Label {
        if outcome >= threshold {
            Label::High
        } else {
            Label::Low
        }
    }

    #[inline]
    pub fn is_high(self) -> bool {
        self == Label::High
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::High => Label::Low,
            Label::Low => Label::High,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub n_high: u64,
    pub n_low: u64,
}

impl ClassCounts {
    pub fn new(n_high: u64, n_low: u64) -> Self {
        Self { n_high, n_low }
    }

    pub fn from_labels(labels: &[Label]) -> Self {
        let n_high = labels.iter().filter(|l| l.is_high()).count() as u64;
        Self::new(n_high, labels.len() as u64 - n_high)
    }

    #[inline]
    pub fn total(&self) -> u64 {
        self.n_high + self.n_low
    }

    #[inline]
    pub fn add(&mut self, label: Label, weight: u64) {
        match label {
            Label::High => self.n_high += weight,
            Label::Low => self.n_low += weight,
        }
    }

    /// Fraction of high labels; `None` for an empty node.
    pub fn high_fraction(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| self.n_high as f64 / n as f64)
    }

    /// Majority class. Ties go to low.
    pub fn majority(&self) -> Label {
        if self.n_high > self.n_low {
            Label::High
        } else {
            Label::Low
        }
    }
}

#[inline]
pub(crate) fn gini_raw(n_high: f64, n_low: f64) -> f64 {
    let n = n_high + n_low;
    let p_high = n_high / n;
    let p_low = n_low / n;
    1.0 - p_high * p_high - p_low * p_low
}

/// Gini impurity `1 - p_high² - p_low²`.
pub fn gini(counts: ClassCounts) -> Result<f64> {
    if counts.total() == 0 {
        return Err(Error::EmptyCounts);
    }
    Ok(gini_raw(counts.n_high as f64, counts.n_low as f64))
}

/// Size-weighted mean of the two children's Gini impurities.
pub fn weighted_split_gini(left: ClassCounts, right: ClassCounts) -> Result<f64> {
    if left.total() == 0 || right.total() == 0 {
        return Err(Error::EmptySplit);
    }
    let n_left = left.total() as f64;
    let n_right = right.total() as f64;
    Ok((n_left * gini(left)? + n_right * gini(right)?) / (n_left + n_right))
}

/// Area under the ROC curve: the probability that a random high example
/// outscores a random low one, ties counted as one half.
///
/// Counting is done in integers (doubled, so half-pairs stay exact) and
/// divided once at the end.
pub fn roc_auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: labels.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("AUC scores".into()));
    }
    let counts = ClassCounts::from_labels(labels);
    if counts.n_high == 0 || counts.n_low == 0 {
        return Err(Error::SingleClass {
            n_high: counts.n_high as usize,
            n_low: counts.n_low as usize,
        });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut doubled_pairs: u128 = 0;
    let mut low_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let value = scores[order[i]];
        let (mut high_here, mut low_here) = (0u128, 0u128);
        while i < order.len() && scores[order[i]].total_cmp(&value) == Ordering::Equal {
            match labels[order[i]] {
                Label::High => high_here += 1,
                Label::Low => low_here += 1,
            }
            i += 1;
        }
        doubled_pairs += 2 * high_here * low_below + high_here * low_here;
        low_below += low_here;
    }
    let denom = 2 * counts.n_high as u128 * counts.n_low as u128;
    Ok(doubled_pairs as f64 / denom as f64)
}

/// Scores paired with binary labels, validated for AUC computation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredLabels {
    scores: Vec<f64>,
    labels: Vec<Label>,
}

impl ScoredLabels {
    pub fn new(scores: Vec<f64>, labels: Vec<Label>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::LengthMismatch {
                left: scores.len(),
                right: labels.len(),
            });
        }
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn auc(&self) -> Result<f64> {
        roc_auc(&self.scores, &self.labels)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SdKind {
    /// Divide by n - 1.
    #[default]
    Sample,
    /// Divide by n.
    Population,
}

/// Weighted running mean/variance (West's update of Welford's method).
/// Integer weights are row multiplicities, e.g. from bootstrap resampling.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct Moments {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Moments {
    #[inline]
    pub(crate) fn add(&mut self, x: f64, weight: u64) {
        if weight == 0 {
            return;
        }
        self.n += weight;
        let delta = x - self.mean;
        self.mean += delta * weight as f64 / self.n as f64;
        self.m2 += delta * (x - self.mean) * weight as f64;
    }

    pub(crate) fn n(&self) -> u64 {
        self.n
    }

    pub(crate) fn mean(&self) -> f64 {
        self.mean
    }

    pub(crate) fn sd(&self, kind: SdKind) -> f64 {
        let var = match kind {
            SdKind::Sample if self.n > 1 => self.m2 / (self.n - 1) as f64,
            SdKind::Sample => 0.0,
            SdKind::Population if self.n > 0 => self.m2 / self.n as f64,
            SdKind::Population => 0.0,
        };
        var.max(0.0).sqrt()
    }
}

/// Arithmetic mean and standard deviation. A single value has SD 0.
pub fn mean_sd(values: &[f64], kind: SdKind) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Empty("mean_sd values"));
    }
    let mut m = Moments::default();
    for &v in values {
        m.add(v, 1);
    }
    Ok((m.mean(), m.sd(kind)))
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Converts a coefficient of determination to an AUC-equivalent through
/// r = √R², Cohen's d = 2r / √(1 - r²), AUC = Φ(d / √2).
///
/// Negative R² (a regressor worse than the mean) is clamped to 0.
pub fn r2_to_auc(r2: f64) -> Result<f64> {
    if r2.is_nan() {
        return Err(Error::NonFinite("R²".into()));
    }
    if r2 >= 1.0 {
        return Err(Error::R2OutOfRange(r2));
    }
    let r2 = if r2 < 0.0 {
        log::warn!("negative R² {r2} clamped to 0 for AUC conversion");
        0.0
    } else {
        r2
    };
    let r = r2.sqrt();
    let d = 2.0 * r / (1.0 - r2).sqrt();
    Ok(normal_cdf(d / std::f64::consts::SQRT_2))
}

/// `1 - SS_res / SS_tot`; may be negative.
pub fn r_squared(predictions: &[f64], outcomes: &[f64]) -> Result<f64> {
    if predictions.len() != outcomes.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: outcomes.len(),
        });
    }
    if outcomes.is_empty() {
        return Err(Error::Empty("R² outcomes"));
    }
    let mean = outcomes.iter().sum::<f64>() / outcomes.len() as f64;
    let ss_tot: f64 = outcomes.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let ss_res: f64 = predictions
        .iter()
        .zip(outcomes)
        .map(|(p, y)| (y - p).powi(2))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}
