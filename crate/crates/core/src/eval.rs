//! Metrics comparing an extracted reward against the groundtruth scorer:
//! Pearson, Spearman, Kendall's tau, and threshold classification.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::irl::{reward_of, RewardWeights};
use crate::world::{FeatureSpec, LabeledSequence, WorldConfig};

/// Paired (learned, truth) score lists of equal length ≥ 2.
#[derive(Debug, Clone)]
pub struct ScorePairSet {
    learned: Vec<f64>,
    truth: Vec<f64>,
}

impl ScorePairSet {
    pub fn new(learned: Vec<f64>, truth: Vec<f64>) -> Result<Self> {
        if learned.len() != truth.len() {
            return Err(Error::Shape(format!(
                "score lists differ in length: {} vs {}",
                learned.len(),
                truth.len()
            )));
        }
        if learned.len() < 2 {
            return Err(Error::Shape("correlation needs at least 2 score pairs".into()));
        }
        Ok(Self { learned, truth })
    }

    pub fn len(&self) -> usize {
        self.learned.len()
    }

    pub fn is_empty(&self) -> bool {
        self.learned.is_empty()
    }
}

fn is_constant(xs: &[f64]) -> bool {
    xs.iter().all(|&x| x == xs[0])
}

/// Pearson correlation: centered dot product over the product of norms.
pub fn pearson(s: &ScorePairSet) -> Result<f64> {
    pearson_of(&s.learned, &s.truth)
}

fn pearson_of(x: &[f64], y: &[f64]) -> Result<f64> {
    if is_constant(x) || is_constant(y) {
        return Err(Error::UndefinedCorrelation("constant input list".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let cx = a - mx;
        let cy = b - my;
        num += cx * cy;
        dx += cx * cx;
        dy += cy * cy;
    }
    Ok(num / (dx.sqrt() * dy.sqrt()))
}

/// Kendall's tau by exact pair enumeration: τ = 2(n_c − n_d) / (n(n−1)).
/// Tied pairs count as neither concordant nor discordant.
pub fn kendall_tau(s: &ScorePairSet) -> Result<f64> {
    let (x, y) = (&s.learned, &s.truth);
    let n = x.len();
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    for i in 0..n {
        for j in (i + 1)..n {
            let sign = (x[i] - x[j]) * (y[i] - y[j]);
            if sign > 0.0 {
                concordant += 1;
            } else if sign < 0.0 {
                discordant += 1;
            }
        }
    }
    Ok(2.0 * (concordant - discordant) as f64 / (n * (n - 1)) as f64)
}

/// Average ranks (1-based); ties share the mean of their positions.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn has_ties(xs: &[f64]) -> bool {
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted.windows(2).any(|w| w[0] == w[1])
}

/// Spearman rank correlation. Tie-free data uses the rank-difference formula
/// 1 − 6Σd²/(n(n²−1)); ties fall back to Pearson of average ranks.
pub fn spearman(s: &ScorePairSet) -> Result<f64> {
    let (x, y) = (&s.learned, &s.truth);
    if is_constant(x) || is_constant(y) {
        return Err(Error::UndefinedCorrelation("constant input list".into()));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    if has_ties(x) || has_ties(y) {
        return pearson_of(&rx, &ry);
    }
    let n = x.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - 6.0 * d2 / (n * (n * n - 1.0)))
}

/// Confusion counts with the derived rates; the identities
/// accuracy = (tp+tn)/total and f1 = 2tp/(2tp+fp+fn) hold by construction
/// and are re-checked when a report is read back.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassificationReport {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ClassificationReport {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let total = (tp + fp + fn_ + tn) as f64;
        let accuracy = if total == 0.0 { 0.0 } else { (tp + tn) as f64 / total };
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f1 = if 2 * tp + fp + fn_ == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        };
        Self { tp, fp, fn_, tn, accuracy, precision, recall, f1 }
    }

    pub fn validate(&self) -> Result<()> {
        let rebuilt = Self::from_counts(self.tp, self.fp, self.fn_, self.tn);
        if (rebuilt.accuracy - self.accuracy).abs() > 1e-12
            || (rebuilt.f1 - self.f1).abs() > 1e-12
            || (rebuilt.precision - self.precision).abs() > 1e-12
            || (rebuilt.recall - self.recall).abs() > 1e-12
        {
            return Err(Error::Parse("classification report fails its count identities".into()));
        }
        Ok(())
    }

    fn balanced_accuracy(&self) -> f64 {
        let tpr = if self.tp + self.fn_ == 0 { 0.0 } else { self.tp as f64 / (self.tp + self.fn_) as f64 };
        let tnr = if self.tn + self.fp == 0 { 0.0 } else { self.tn as f64 / (self.tn + self.fp) as f64 };
        (tpr + tnr) / 2.0
    }
}

/// Predicts toxic when the learned reward falls below `threshold` (lower
/// reward = more toxic under the extraction convention).
pub fn classify_with_reward(
    sequences: &[LabeledSequence],
    weights: &RewardWeights,
    spec: &FeatureSpec,
    world: &WorldConfig,
    threshold: f64,
) -> Result<ClassificationReport> {
    if sequences.is_empty() {
        return Err(Error::Config("labeled set must be nonempty".into()));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for entry in sequences {
        let predicted_toxic = reward_of(&entry.seq, weights, spec, world)? < threshold;
        match (predicted_toxic, entry.is_toxic()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(ClassificationReport::from_counts(tp, fp, fn_, tn))
}

/// Picks the reward threshold maximizing balanced accuracy on a calibration
/// split: candidates are midpoints between consecutive distinct scores plus
/// one sentinel on each side. Ties resolve to the smallest threshold.
pub fn calibrate_threshold(
    calibration: &[LabeledSequence],
    weights: &RewardWeights,
    spec: &FeatureSpec,
    world: &WorldConfig,
) -> Result<f64> {
    if calibration.is_empty() {
        return Err(Error::Config("calibration set must be nonempty".into()));
    }
    let mut scores = Vec::with_capacity(calibration.len());
    for entry in calibration {
        scores.push(reward_of(&entry.seq, weights, spec, world)?);
    }
    let mut sorted = scores.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted.dedup();
    let mut candidates = vec![sorted[0] - 1.0];
    candidates.extend(sorted.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    candidates.push(sorted[sorted.len() - 1] + 1.0);

    let mut best_threshold = candidates[0];
    let mut best_balanced = f64::NEG_INFINITY;
    for &threshold in &candidates {
        let report = classify_with_reward(calibration, weights, spec, world, threshold)?;
        let balanced = report.balanced_accuracy();
        if balanced > best_balanced {
            best_balanced = balanced;
            best_threshold = threshold;
        }
    }
    Ok(best_threshold)
}

/// One evaluation record: the correlations plus classification quality at the
/// calibrated threshold. Correlations are None when undefined (constant input).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub kendall: Option<f64>,
    pub accuracy: f64,
    pub f1: f64,
    pub n: usize,
    pub threshold: f64,
}
