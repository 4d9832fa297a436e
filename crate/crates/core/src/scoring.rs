//! OOD scoring and threshold-free evaluation metrics.
//!
//! The score of a test point is the negated projected Euclidean distance to
//! its nearest labeled class center, so higher means more ID-like and the
//! maximum attainable score is zero. Metrics are rank statistics over ID and
//! OOD score lists: AUROC (Mann-Whitney with ties at half weight), FPR at a
//! TPR target, equal-prior minimum detection error, and step-wise AUPR.

use std::fmt::Write as _;

use nalgebra::DVector;
use thiserror::Error;

use crate::data::EmbeddingSet;
use crate::metric::ClassCenters;
use crate::projector::Projector;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("score list is empty")]
    Empty,
    #[error("tpr target must lie in (0, 1], got {0}")]
    BadTprTarget(f64),
    #[error("projector d_in {d_in} does not match input dim {dim}")]
    DimMismatch { d_in: usize, dim: usize },
    #[error("score {value} at index {index} is positive; MS scores are negated distances")]
    PositiveScore { index: usize, value: f64 },
    #[error("non-finite score at index {index}")]
    NonFinite { index: usize },
    #[error("scores file line {line}: cannot parse {text:?} as a number")]
    Parse { line: usize, text: String },
    #[error("scores file line {line}: non-finite value")]
    NonFiniteLine { line: usize },
}

/// Negated minimum projected distance from `x` to the class centers.
pub fn ms_score(p: &Projector, centers: &ClassCenters, x: &[f64]) -> Result<f64, ScoreError> {
    if x.len() != p.d_in() || centers.dim() != p.d_in() {
        return Err(ScoreError::DimMismatch { d_in: p.d_in(), dim: x.len() });
    }
    let projected = p.apply(x);
    let mut best = f64::INFINITY;
    for center in centers.centers() {
        let pc = p.apply(center.as_slice());
        let d = (&projected - pc).norm();
        best = best.min(d);
    }
    Ok(-best)
}

/// Scores every row of a set, projecting the class centers once.
pub fn score_set(
    p: &Projector,
    centers: &ClassCenters,
    set: &EmbeddingSet,
) -> Result<Vec<f64>, ScoreError> {
    if set.dim() != p.d_in() || centers.dim() != p.d_in() {
        return Err(ScoreError::DimMismatch { d_in: p.d_in(), dim: set.dim() });
    }
    let projected_centers: Vec<DVector<f64>> =
        centers.centers().iter().map(|c| p.apply(c.as_slice())).collect();
    let mut scores = Vec::with_capacity(set.n_rows());
    for row in set.rows() {
        let projected = p.apply(row);
        let mut best = f64::INFINITY;
        for pc in &projected_centers {
            let d = (&projected - pc).norm();
            best = best.min(d);
        }
        scores.push(-best);
    }
    Ok(scores)
}

/// The largest threshold that keeps at least `ceil(target * n)` of the ID
/// scores at or above it: the `ceil(target * n)`-th largest score.
pub fn choose_threshold(id_scores: &[f64], tpr_target: f64) -> Result<f64, ScoreError> {
    if id_scores.is_empty() {
        return Err(ScoreError::Empty);
    }
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(ScoreError::BadTprTarget(tpr_target));
    }
    let n = id_scores.len();
    let need = ((tpr_target * n as f64).ceil() as usize).clamp(1, n);
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(sorted[need - 1])
}

/// Per-point ID decision: score at or above the threshold.
pub fn decide(scores: &[f64], threshold: f64) -> Vec<bool> {
    scores.iter().map(|&s| s >= threshold).collect()
}

/// MS scores with the selected threshold and the decisions it implies.
/// Scores must be finite and non-positive.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub scores: Vec<f64>,
    pub threshold: f64,
    pub decisions: Vec<bool>,
}

impl ScoreReport {
    pub fn new(scores: Vec<f64>, threshold: f64) -> Result<Self, ScoreError> {
        for (index, &value) in scores.iter().enumerate() {
            if !value.is_finite() {
                return Err(ScoreError::NonFinite { index });
            }
            if value > 0.0 {
                return Err(ScoreError::PositiveScore { index, value });
            }
        }
        let decisions = decide(&scores, threshold);
        Ok(ScoreReport { scores, threshold, decisions })
    }
}

fn require_nonempty(id: &[f64], ood: &[f64]) -> Result<(), ScoreError> {
    if id.is_empty() || ood.is_empty() {
        return Err(ScoreError::Empty);
    }
    Ok(())
}

/// Mann-Whitney statistic with ties counted at half weight, ID as positives.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64, ScoreError> {
    require_nonempty(id_scores, ood_scores)?;
    let mut ood = ood_scores.to_vec();
    ood.sort_by(f64::total_cmp);
    let mut favorable = 0.0;
    for &s in id_scores {
        let below = ood.partition_point(|&o| o < s);
        let not_above = ood.partition_point(|&o| o <= s);
        favorable += below as f64 + 0.5 * (not_above - below) as f64;
    }
    Ok(favorable / (id_scores.len() as f64 * ood_scores.len() as f64))
}

/// Fraction of OOD scores at or above the threshold that achieves the TPR
/// target on the ID scores.
pub fn fpr_at_tpr(
    id_scores: &[f64],
    ood_scores: &[f64],
    tpr_target: f64,
) -> Result<f64, ScoreError> {
    require_nonempty(id_scores, ood_scores)?;
    let threshold = choose_threshold(id_scores, tpr_target)?;
    let hits = ood_scores.iter().filter(|&&s| s >= threshold).count();
    Ok(hits as f64 / ood_scores.len() as f64)
}

/// Minimum of `0.5 * (1 - TPR) + 0.5 * FPR` over thresholds drawn from the
/// observed scores (equal-prior convention, inclusive `>=` decisions).
pub fn detection_error(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64, ScoreError> {
    require_nonempty(id_scores, ood_scores)?;
    let mut id = id_scores.to_vec();
    id.sort_by(f64::total_cmp);
    let mut ood = ood_scores.to_vec();
    ood.sort_by(f64::total_cmp);
    let n_id = id.len() as f64;
    let n_ood = ood.len() as f64;
    let mut best = f64::INFINITY;
    for &threshold in id.iter().chain(ood.iter()) {
        let tpr = (id.len() - id.partition_point(|&s| s < threshold)) as f64 / n_id;
        let fpr = (ood.len() - ood.partition_point(|&s| s < threshold)) as f64 / n_ood;
        best = best.min(0.5 * (1.0 - tpr) + 0.5 * fpr);
    }
    Ok(best)
}

/// Step-wise (non-interpolated) area under the precision-recall curve over
/// descending score thresholds, positives first.
pub fn aupr(pos_scores: &[f64], neg_scores: &[f64]) -> Result<f64, ScoreError> {
    require_nonempty(pos_scores, neg_scores)?;
    let mut pos = pos_scores.to_vec();
    pos.sort_by(|a, b| b.total_cmp(a));
    let mut neg = neg_scores.to_vec();
    neg.sort_by(|a, b| b.total_cmp(a));
    let total_pos = pos.len() as f64;

    let mut thresholds: Vec<f64> = pos.iter().chain(neg.iter()).cloned().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();

    let mut area = 0.0;
    let mut pi = 0usize;
    let mut ni = 0usize;
    let mut prev_recall = 0.0;
    for t in thresholds {
        while pi < pos.len() && pos[pi] >= t {
            pi += 1;
        }
        while ni < neg.len() && neg[ni] >= t {
            ni += 1;
        }
        let recall = pi as f64 / total_pos;
        if pi + ni > 0 && recall > prev_recall {
            let precision = pi as f64 / (pi + ni) as f64;
            area += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
    }
    Ok(area)
}

/// The five evaluation metrics plus the context needed to reproduce them.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub auroc: f64,
    pub fpr95: f64,
    pub detection_error: f64,
    pub aupr_in: f64,
    pub aupr_out: f64,
    pub threshold: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

impl MetricsReport {
    /// Computes all metrics from raw score lists. `threshold` is reported
    /// from the ID scores at the TPR target; AUPR-Out flips signs so that
    /// OOD plays the positive class.
    pub fn compute(
        id_scores: &[f64],
        ood_scores: &[f64],
        tpr_target: f64,
    ) -> Result<Self, ScoreError> {
        require_nonempty(id_scores, ood_scores)?;
        let neg_id: Vec<f64> = id_scores.iter().map(|s| -s).collect();
        let neg_ood: Vec<f64> = ood_scores.iter().map(|s| -s).collect();
        Ok(MetricsReport {
            auroc: auroc(id_scores, ood_scores)?,
            fpr95: fpr_at_tpr(id_scores, ood_scores, tpr_target)?,
            detection_error: detection_error(id_scores, ood_scores)?,
            aupr_in: aupr(id_scores, ood_scores)?,
            aupr_out: aupr(&neg_ood, &neg_id)?,
            threshold: choose_threshold(id_scores, tpr_target)?,
            n_id: id_scores.len(),
            n_ood: ood_scores.len(),
        })
    }

    /// `key=value` lines, full float precision.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "auroc={}", self.auroc);
        let _ = writeln!(out, "fpr95={}", self.fpr95);
        let _ = writeln!(out, "detection_error={}", self.detection_error);
        let _ = writeln!(out, "aupr_in={}", self.aupr_in);
        let _ = writeln!(out, "aupr_out={}", self.aupr_out);
        let _ = writeln!(out, "threshold={}", self.threshold);
        let _ = writeln!(out, "n_id={}", self.n_id);
        let _ = writeln!(out, "n_ood={}", self.n_ood);
        out
    }
}

/// Parses a scores file: one finite real per line. Errors name the line.
pub fn parse_scores_text(text: &str) -> Result<Vec<f64>, ScoreError> {
    let mut scores = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let value: f64 = trimmed
            .parse()
            .map_err(|_| ScoreError::Parse { line: idx + 1, text: trimmed.to_string() })?;
        if !value.is_finite() {
            return Err(ScoreError::NonFiniteLine { line: idx + 1 });
        }
        scores.push(value);
    }
    if scores.is_empty() {
        return Err(ScoreError::Empty);
    }
    Ok(scores)
}

/// One score per line, full float precision.
pub fn scores_to_text(scores: &[f64]) -> String {
    let mut out = String::with_capacity(scores.len() * 8);
    for s in scores {
        let _ = writeln!(out, "{s}");
    }
    out
}
