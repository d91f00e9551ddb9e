//! Split conformal prediction for multiclass classifier scores.
//!
//! The nonconformity of a labelled example is `1 - p(label)`. Calibration
//! takes the `k`-th smallest nonconformity score of a held-out labelled set,
//! with `k = ceil((1 - alpha) * (m + 1))`, and the prediction set of a new
//! example keeps every class whose probability strictly exceeds `1 - q_hat`.
//! Under exchangeability the true label is then covered with probability at
//! least `1 - alpha`.
//!
//! When `k > m` the calibration set is too small for the requested level and
//! the model switches to full-set mode: every class is always predicted.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the sum of a probability vector.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

/// One scored example: classifier probabilities plus optional ground truth
/// and categorical group attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub label: Option<usize>,
    pub scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub groups: BTreeMap<String, String>,
}

impl ScoreRecord {
    pub fn new(id: impl Into<String>, label: Option<usize>, scores: Vec<f64>) -> Self {
        ScoreRecord {
            id: id.into(),
            label,
            scores,
            groups: BTreeMap::new(),
        }
    }

    pub fn with_group(mut self, attribute: impl Into<String>, value: impl Into<String>) -> Self {
        self.groups.insert(attribute.into(), value.into());
        self
    }

    pub fn n_classes(&self) -> usize {
        self.scores.len()
    }

    /// Checks the probability vector and label. With `renormalize` set, a
    /// vector that does not sum to one is rescaled instead of rejected.
    pub fn validate(&mut self, renormalize: bool) -> Result<()> {
        let invalid = |reason: String| Error::Validation {
            id: self.id.clone(),
            reason,
        };
        let k = self.scores.len();
        if k < 2 {
            return Err(invalid(format!("need at least 2 class scores, got {k}")));
        }
        if let Some((j, s)) = self
            .scores
            .iter()
            .enumerate()
            .find(|(_, s)| !s.is_finite() || **s < 0.0)
        {
            return Err(invalid(format!("score_{j} = {s} is not a non-negative number")));
        }
        let sum: f64 = self.scores.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            if !renormalize {
                return Err(invalid(format!("scores sum to {sum}, not 1")));
            }
            if sum <= 0.0 {
                return Err(invalid("scores sum to 0; cannot renormalize".into()));
            }
            self.scores.iter_mut().for_each(|s| *s /= sum);
        }
        if let Some((j, s)) = self.scores.iter().enumerate().find(|(_, s)| **s > 1.0) {
            return Err(invalid(format!("score_{j} = {s} exceeds 1")));
        }
        if let Some(label) = self.label {
            if label >= k {
                return Err(invalid(format!("label {label} out of range for {k} classes")));
            }
        }
        Ok(())
    }

    /// Index of the highest score; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (j, &s) in self.scores.iter().enumerate().skip(1) {
            if s > self.scores[best] {
                best = j;
            }
        }
        best
    }
}

/// Nonconformity score of `record` under the candidate `label`: `1 - p(label)`.
pub fn nonconformity(record: &ScoreRecord, label: usize) -> Result<f64> {
    record
        .scores
        .get(label)
        .map(|p| 1.0 - p)
        .ok_or(Error::InvalidLabel {
            label,
            n_classes: record.n_classes(),
        })
}

/// Nonconformity score function. Only one ships; the tag keeps model files
/// forward compatible.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreFn {
    #[default]
    Sadinle,
}

impl ScoreFn {
    pub fn name(self) -> &'static str {
        match self {
            ScoreFn::Sadinle => "sadinle",
        }
    }
}

/// Rank `k = ceil((1 - alpha) * (m + 1))` of the calibration order statistic.
///
/// The product is snapped to the nearest integer when it is within floating
/// point noise of one, so that e.g. `alpha = 0.18, m = 149` gives 123 rather than 124.
pub fn order_statistic_rank(alpha: f64, m: usize) -> usize {
    let x = (1.0 - alpha) * (m as f64 + 1.0);
    let nearest = x.round();
    let k = if (x - nearest).abs() <= 1e-9 * x.max(1.0) {
        nearest
    } else {
        x.ceil()
    };
    k.max(1.0) as usize
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidAlpha(alpha))
    }
}

/// A calibrated conformal threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub alpha: f64,
    /// `k`-th smallest calibration nonconformity score; 1.0 in full-set mode.
    pub q_hat: f64,
    pub m: usize,
    pub k: usize,
    pub full_set_mode: bool,
    pub score_fn: ScoreFn,
    pub n_classes: usize,
}

impl CalibrationModel {
    /// Calibrates directly from a multiset of nonconformity scores.
    pub fn from_nonconformity(mut scores: Vec<f64>, alpha: f64, n_classes: usize) -> Result<Self> {
        check_alpha(alpha)?;
        if scores.is_empty() {
            return Err(Error::EmptyCalibration);
        }
        if n_classes < 2 {
            return Err(Error::InvalidClassCount(n_classes));
        }
        let m = scores.len();
        let k = order_statistic_rank(alpha, m);
        let full_set_mode = k > m;
        let q_hat = if full_set_mode {
            1.0
        } else {
            let (_, kth, _) = scores.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        };
        Ok(CalibrationModel {
            alpha,
            q_hat,
            m,
            k,
            full_set_mode,
            score_fn: ScoreFn::Sadinle,
            n_classes,
        })
    }

    /// Probability threshold `1 - q_hat`; `None` in full-set mode.
    pub fn threshold(&self) -> Option<f64> {
        (!self.full_set_mode).then_some(1.0 - self.q_hat)
    }

    /// Expected marginal coverage `k / (m + 1)` for continuous scores.
    pub fn expected_coverage(&self) -> f64 {
        if self.full_set_mode {
            1.0
        } else {
            self.k as f64 / (self.m as f64 + 1.0)
        }
    }
}

/// Calibrates on labelled records at miscoverage level `alpha`.
pub fn calibrate(records: &[ScoreRecord], alpha: f64) -> Result<CalibrationModel> {
    check_alpha(alpha)?;
    let first = records.first().ok_or(Error::EmptyCalibration)?;
    let n_classes = first.n_classes();
    let scores = records
        .iter()
        .map(|r| {
            if r.n_classes() != n_classes {
                return Err(Error::DimensionMismatch {
                    id: r.id.clone(),
                    expected: n_classes,
                    found: r.n_classes(),
                });
            }
            let label = r.label.ok_or_else(|| Error::MissingLabel { id: r.id.clone() })?;
            nonconformity(r, label)
        })
        .collect::<Result<Vec<_>>>()?;
    CalibrationModel::from_nonconformity(scores, alpha, n_classes)
}

/// Classes predicted for one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub id: String,
    /// Sorted ascending.
    pub classes: Vec<usize>,
    /// Probability threshold that was applied; absent in full-set mode.
    pub threshold: Option<f64>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.classes.binary_search(&class).is_ok()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PredictOptions {
    /// Add the argmax class when the thresholded set would be empty.
    pub force_nonempty: bool,
}

pub fn predict_set(record: &ScoreRecord, model: &CalibrationModel) -> Result<PredictionSet> {
    predict_set_with(record, model, PredictOptions::default())
}

pub fn predict_set_with(
    record: &ScoreRecord,
    model: &CalibrationModel,
    options: PredictOptions,
) -> Result<PredictionSet> {
    if record.n_classes() != model.n_classes {
        return Err(Error::DimensionMismatch {
            id: record.id.clone(),
            expected: model.n_classes,
            found: record.n_classes(),
        });
    }
    let threshold = model.threshold();
    let mut classes: Vec<usize> = match threshold {
        None => (0..model.n_classes).collect(),
        Some(t) => record
            .scores
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > t)
            .map(|(j, _)| j)
            .collect(),
    };
    if classes.is_empty() && options.force_nonempty {
        classes.push(record.argmax());
    }
    Ok(PredictionSet {
        id: record.id.clone(),
        classes,
        threshold,
    })
}

/// Predicts every record, preserving input order.
pub fn predict_batch(records: &[ScoreRecord], model: &CalibrationModel) -> Result<Vec<PredictionSet>> {
    predict_batch_with(records, model, PredictOptions::default())
}

pub fn predict_batch_with(
    records: &[ScoreRecord],
    model: &CalibrationModel,
    options: PredictOptions,
) -> Result<Vec<PredictionSet>> {
    records
        .par_iter()
        .map(|r| predict_set_with(r, model, options))
        .collect()
}
