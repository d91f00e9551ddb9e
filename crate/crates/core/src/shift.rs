//! Descriptive comparison of conformal audits across evaluation sets.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::conformal::{calibrate, predict_batch_with, PredictOptions, ScoreRecord};
use crate::error::{Error, Result};
use crate::metrics::{coverage_audit, AuditReport};

/// Differences `b - a` between two audits at the same alpha and class count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftDiff {
    pub report_a: AuditReport,
    pub report_b: AuditReport,
    pub coverage_delta: f64,
    pub violation_delta: f64,
    pub avg_set_size_delta: f64,
    /// Per true class difference in mean set size; `None` where either
    /// report has no examples of that class.
    pub per_class_size_delta: Vec<Option<f64>>,
    pub full_set_rate_delta: f64,
}

pub fn diff_audits(report_a: &AuditReport, report_b: &AuditReport) -> Result<ShiftDiff> {
    if report_a.n_classes != report_b.n_classes {
        return Err(Error::IncomparableReports(format!(
            "{} vs {} classes",
            report_a.n_classes, report_b.n_classes
        )));
    }
    if report_a.alpha_used != report_b.alpha_used {
        return Err(Error::IncomparableReports(format!(
            "alpha {} vs {}",
            report_a.alpha_used, report_b.alpha_used
        )));
    }
    let per_class_size_delta = report_a
        .per_class_mean_set_size()
        .into_iter()
        .zip(report_b.per_class_mean_set_size())
        .map(|(a, b)| Some(b? - a?))
        .collect();
    Ok(ShiftDiff {
        coverage_delta: report_b.coverage - report_a.coverage,
        violation_delta: report_b.violation - report_a.violation,
        avg_set_size_delta: report_b.avg_set_size - report_a.avg_set_size,
        per_class_size_delta,
        full_set_rate_delta: report_b.full_set_rate() - report_a.full_set_rate(),
        report_a: report_a.clone(),
        report_b: report_b.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSweepRow {
    pub test_set: String,
    pub alpha: f64,
    pub q_hat: f64,
    pub full_set_mode: bool,
    pub coverage: f64,
    pub violation: f64,
    pub avg_set_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSweep {
    pub rows: Vec<AlphaSweepRow>,
}

impl AlphaSweep {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "test_set",
            "alpha",
            "q_hat",
            "full_set_mode",
            "coverage",
            "violation",
            "avg_set_size",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.test_set.clone(),
                r.alpha.to_string(),
                r.q_hat.to_string(),
                r.full_set_mode.to_string(),
                r.coverage.to_string(),
                r.violation.to_string(),
                r.avg_set_size.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Calibrates once per alpha on `cal` and audits every named test set with
/// that model. Rows are ordered by test set, then alpha.
pub fn alpha_sweep(
    cal: &[ScoreRecord],
    test_sets: &[(String, Vec<ScoreRecord>)],
    alphas: &[f64],
    options: PredictOptions,
) -> Result<AlphaSweep> {
    if alphas.is_empty() {
        return Err(Error::EmptyAlphas);
    }
    let models = alphas
        .iter()
        .map(|&a| calibrate(cal, a))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(alphas.len() * test_sets.len());
    for (name, records) in test_sets {
        for model in &models {
            let sets = predict_batch_with(records, model, options)?;
            let audit = coverage_audit(&sets, records, model.n_classes, model.alpha)?;
            rows.push(AlphaSweepRow {
                test_set: name.clone(),
                alpha: model.alpha,
                q_hat: model.q_hat,
                full_set_mode: model.full_set_mode,
                coverage: audit.coverage,
                violation: audit.violation,
                avg_set_size: audit.avg_set_size,
            });
        }
    }
    Ok(AlphaSweep { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::PredictionSet;

    fn report(sizes: &[(usize, usize)], n_classes: usize, alpha: f64) -> AuditReport {
        let mut sets = Vec::new();
        let mut recs = Vec::new();
        for (i, &(label, size)) in sizes.iter().enumerate() {
            let id = format!("r{i}");
            sets.push(PredictionSet {
                id: id.clone(),
                classes: (0..size).collect(),
                threshold: None,
            });
            recs.push(ScoreRecord::new(id, Some(label), vec![1.0 / n_classes as f64; n_classes]));
        }
        coverage_audit(&sets, &recs, n_classes, alpha).unwrap()
    }

    #[test]
    fn self_diff_is_zero() {
        let r = report(&[(0, 1), (1, 2), (2, 4)], 4, 0.05);
        let d = diff_audits(&r, &r).unwrap();
        assert_eq!(d.coverage_delta, 0.0);
        assert_eq!(d.violation_delta, 0.0);
        assert_eq!(d.avg_set_size_delta, 0.0);
        assert_eq!(d.full_set_rate_delta, 0.0);
        assert_eq!(d.per_class_size_delta, vec![Some(0.0), Some(0.0), Some(0.0), None]);
    }

    #[test]
    fn deltas_are_b_minus_a() {
        let a = report(&[(0, 1), (1, 1)], 3, 0.1);
        let b = report(&[(0, 3), (1, 1), (2, 3)], 3, 0.1);
        let d = diff_audits(&a, &b).unwrap();
        assert_eq!(d.avg_set_size_delta, 7.0 / 3.0 - 1.0);
        assert_eq!(d.full_set_rate_delta, 2.0 / 3.0);
        assert_eq!(d.per_class_size_delta, vec![Some(2.0), Some(0.0), None]);
        assert_eq!(d.coverage_delta, b.coverage - a.coverage);
    }

    #[test]
    fn incomparable() {
        let a = report(&[(0, 1)], 3, 0.1);
        let b = report(&[(0, 1)], 4, 0.1);
        let c = report(&[(0, 1)], 3, 0.05);
        assert!(matches!(diff_audits(&a, &b), Err(Error::IncomparableReports(_))));
        assert!(matches!(diff_audits(&a, &c), Err(Error::IncomparableReports(_))));
    }

    #[test]
    fn empty_alphas() {
        assert!(matches!(
            alpha_sweep(&[], &[], &[], PredictOptions::default()),
            Err(Error::EmptyAlphas)
        ));
    }
}
