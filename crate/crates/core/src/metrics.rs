//! Coverage, set-size statistics and weighted Cohen's kappa.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::conformal::{PredictionSet, ScoreRecord};
use crate::error::{Error, Result};

/// Coverage and set-size summary of a batch of prediction sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub n: usize,
    pub n_classes: usize,
    pub covered: usize,
    pub coverage: f64,
    /// `max(0, (1 - alpha) - coverage)`.
    pub violation: f64,
    pub avg_set_size: f64,
    /// Counts of set sizes `0..=K`.
    pub set_size_hist: Vec<usize>,
    /// `K x (K + 1)` counts: true class by set size.
    pub per_class_hist: Vec<Vec<usize>>,
    pub empty_set_count: usize,
    pub alpha_used: f64,
}

impl AuditReport {
    /// Mean set size among examples of each true class; `None` for classes
    /// that never occur.
    pub fn per_class_mean_set_size(&self) -> Vec<Option<f64>> {
        self.per_class_hist
            .iter()
            .map(|row| {
                let count: usize = row.iter().sum();
                (count > 0).then(|| {
                    let total: usize = row.iter().enumerate().map(|(s, c)| s * c).sum();
                    total as f64 / count as f64
                })
            })
            .collect()
    }

    /// Fraction of examples whose set contains every class.
    pub fn full_set_rate(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        self.set_size_hist[self.n_classes] as f64 / self.n as f64
    }

    /// Tidy `set_size,count` rows.
    pub fn write_hist_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["set_size", "count"])?;
        for (size, count) in self.set_size_hist.iter().enumerate() {
            w.write_record([size.to_string(), count.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// Tidy `set_size,count,true_class` rows.
    pub fn write_per_class_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["set_size", "count", "true_class"])?;
        for (class, row) in self.per_class_hist.iter().enumerate() {
            for (size, count) in row.iter().enumerate() {
                w.write_record([size.to_string(), count.to_string(), class.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Audits prediction sets against the labels of the records they were built
/// from. `sets[i]` must carry the id of `records[i]`.
pub fn coverage_audit(
    sets: &[PredictionSet],
    records: &[ScoreRecord],
    n_classes: usize,
    alpha: f64,
) -> Result<AuditReport> {
    if sets.len() != records.len() {
        return Err(Error::LengthMismatch {
            left: sets.len(),
            right: records.len(),
        });
    }
    if sets.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut set_size_hist = vec![0usize; n_classes + 1];
    let mut per_class_hist = vec![vec![0usize; n_classes + 1]; n_classes];
    let mut covered = 0usize;
    let mut total_size = 0usize;
    for (set, record) in sets.iter().zip(records) {
        if set.id != record.id {
            return Err(Error::Alignment {
                set_id: set.id.clone(),
                record_id: record.id.clone(),
            });
        }
        let label = record
            .label
            .ok_or_else(|| Error::MissingLabel { id: record.id.clone() })?;
        if label >= n_classes {
            return Err(Error::InvalidLabel { label, n_classes });
        }
        let size = set.len();
        if size > n_classes {
            return Err(Error::DimensionMismatch {
                id: set.id.clone(),
                expected: n_classes,
                found: size,
            });
        }
        set_size_hist[size] += 1;
        per_class_hist[label][size] += 1;
        total_size += size;
        if set.contains(label) {
            covered += 1;
        }
    }
    let n = sets.len();
    let coverage = covered as f64 / n as f64;
    Ok(AuditReport {
        n,
        n_classes,
        covered,
        coverage,
        violation: ((1.0 - alpha) - coverage).max(0.0),
        avg_set_size: total_size as f64 / n as f64,
        empty_set_count: set_size_hist[0],
        set_size_hist,
        per_class_hist,
        alpha_used: alpha,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// `w_ij = 1 - |i - j| / (K - 1)`.
    #[default]
    Linear,
    /// Plain Cohen's kappa: credit only for exact agreement.
    None,
}

impl Weighting {
    pub fn weight(self, i: usize, j: usize, n_classes: usize) -> f64 {
        match self {
            Weighting::Linear => 1.0 - i.abs_diff(j) as f64 / (n_classes - 1) as f64,
            Weighting::None => f64::from(u8::from(i == j)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaResult {
    pub kappa: f64,
    pub p_o: f64,
    pub p_e: f64,
    /// `confusion[i][j]` counts rater A = i, rater B = j.
    pub confusion: Vec<Vec<u64>>,
    pub weighting: Weighting,
}

/// Weighted Cohen's kappa between two label sequences over `n_classes`
/// ordinal categories.
pub fn weighted_kappa(
    rater_a: &[usize],
    rater_b: &[usize],
    n_classes: usize,
    weighting: Weighting,
) -> Result<KappaResult> {
    if n_classes < 2 {
        return Err(Error::InvalidClassCount(n_classes));
    }
    if rater_a.len() != rater_b.len() {
        return Err(Error::LengthMismatch {
            left: rater_a.len(),
            right: rater_b.len(),
        });
    }
    if rater_a.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut confusion = vec![vec![0u64; n_classes]; n_classes];
    for (&a, &b) in rater_a.iter().zip(rater_b) {
        for label in [a, b] {
            if label >= n_classes {
                return Err(Error::InvalidLabel { label, n_classes });
            }
        }
        confusion[a][b] += 1;
    }

    let n = rater_a.len() as f64;
    let rows: Vec<f64> = confusion.iter().map(|r| r.iter().sum::<u64>() as f64).collect();
    let cols: Vec<f64> = (0..n_classes)
        .map(|j| confusion.iter().map(|r| r[j]).sum::<u64>() as f64)
        .collect();
    let mut observed = 0.0;
    let mut chance = 0.0;
    for i in 0..n_classes {
        for j in 0..n_classes {
            let w = weighting.weight(i, j, n_classes);
            observed += w * confusion[i][j] as f64;
            chance += w * rows[i] * cols[j];
        }
    }
    let p_o = observed / n;
    let p_e = chance / (n * n);
    if p_e >= 1.0 {
        return Err(Error::DegenerateAgreement);
    }
    Ok(KappaResult {
        kappa: (p_o - p_e) / (1.0 - p_e),
        p_o,
        p_e,
        confusion,
        weighting,
    })
}

/// Top-1 class of each record.
pub fn argmax_labels(records: &[ScoreRecord]) -> Vec<usize> {
    records.iter().map(ScoreRecord::argmax).collect()
}

/// Linear-weighted kappa of argmax predictions against the true labels.
pub fn argmax_kappa(records: &[ScoreRecord], n_classes: usize) -> Result<KappaResult> {
    let truth = records
        .iter()
        .map(|r| r.label.ok_or_else(|| Error::MissingLabel { id: r.id.clone() }))
        .collect::<Result<Vec<_>>>()?;
    weighted_kappa(&argmax_labels(records), &truth, n_classes, Weighting::Linear)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn from_confusion(c: &[&[usize]]) -> (Vec<usize>, Vec<usize>) {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (i, row) in c.iter().enumerate() {
            for (j, &count) in row.iter().enumerate() {
                a.extend(std::iter::repeat_n(i, count));
                b.extend(std::iter::repeat_n(j, count));
            }
        }
        (a, b)
    }

    fn set(id: &str, classes: &[usize]) -> PredictionSet {
        PredictionSet {
            id: id.into(),
            classes: classes.to_vec(),
            threshold: Some(0.1),
        }
    }

    fn labelled(id: &str, label: usize) -> ScoreRecord {
        ScoreRecord::new(id, Some(label), vec![0.25; 4])
    }

    #[test]
    fn kappa_identical_is_one() {
        let v = [0, 1, 2, 3, 3, 2, 1];
        let r = weighted_kappa(&v, &v, 4, Weighting::Linear).unwrap();
        assert_eq!(r.kappa, 1.0);
        assert_eq!(r.p_o, 1.0);
    }

    #[test]
    fn kappa_independence_is_zero() {
        let (a, b) = from_confusion(&[&[1, 1], &[1, 1]]);
        let r = weighted_kappa(&a, &b, 2, Weighting::Linear).unwrap();
        assert_eq!(r.p_o, 0.5);
        assert_eq!(r.p_e, 0.5);
        assert_eq!(r.kappa, 0.0);
    }

    #[test]
    fn kappa_four_class_matches_exact_fraction() {
        // Evaluated independently in exact rational arithmetic:
        // P_o = 11/12, P_e = 11/18, kappa = 11/14.
        let (a, b) = from_confusion(&[&[2, 1, 0, 0], &[0, 3, 1, 0], &[0, 0, 2, 1], &[0, 0, 0, 2]]);
        let r = weighted_kappa(&a, &b, 4, Weighting::Linear).unwrap();
        assert!((r.p_o - 11.0 / 12.0).abs() < 1e-12);
        assert!((r.p_e - 11.0 / 18.0).abs() < 1e-12);
        assert!((r.kappa - 11.0 / 14.0).abs() < 1e-12);
        assert_eq!(r.confusion[1], vec![0, 3, 1, 0]);
    }

    #[test]
    fn kappa_unweighted() {
        // p_o = 0.75, p_e = (3*2 + 1*2)/16 = 0.5
        let r = weighted_kappa(&[0, 0, 0, 1], &[0, 0, 1, 1], 2, Weighting::None).unwrap();
        assert_eq!(r.kappa, 0.5);
    }

    #[test]
    fn kappa_errors() {
        assert!(matches!(weighted_kappa(&[0], &[0], 1, Weighting::Linear), Err(Error::InvalidClassCount(1))));
        assert!(matches!(
            weighted_kappa(&[1, 1], &[1, 1], 3, Weighting::Linear),
            Err(Error::DegenerateAgreement)
        ));
        assert!(matches!(weighted_kappa(&[], &[], 3, Weighting::Linear), Err(Error::EmptyInput)));
        assert!(weighted_kappa(&[0, 3], &[0, 1], 3, Weighting::Linear).is_err());
        assert!(weighted_kappa(&[0, 1], &[0], 3, Weighting::Linear).is_err());
    }

    #[test]
    fn audit_full_coverage() {
        let sets = vec![set("a", &[0, 1]), set("b", &[2])];
        let recs = vec![labelled("a", 1), labelled("b", 2)];
        let r = coverage_audit(&sets, &recs, 4, 0.05).unwrap();
        assert_eq!(r.coverage, 1.0);
        assert_eq!(r.violation, 0.0);
        assert_eq!(r.avg_set_size, 1.5);
        assert_eq!(r.set_size_hist, vec![0, 1, 1, 0, 0]);
        assert_eq!(r.per_class_hist[1], vec![0, 0, 1, 0, 0]);
        assert_eq!(r.per_class_mean_set_size(), vec![None, Some(2.0), Some(1.0), None]);
    }

    #[test]
    fn audit_all_empty() {
        let sets = vec![set("a", &[]), set("b", &[]), set("c", &[])];
        let recs = vec![labelled("a", 0), labelled("b", 1), labelled("c", 0)];
        let r = coverage_audit(&sets, &recs, 4, 0.1).unwrap();
        assert_eq!(r.coverage, 0.0);
        assert_eq!(r.violation, 1.0 - 0.1);
        assert_eq!(r.empty_set_count, 3);
    }

    #[test]
    fn audit_errors() {
        let sets = vec![set("a", &[0])];
        assert!(matches!(
            coverage_audit(&sets, &[labelled("b", 0)], 4, 0.1),
            Err(Error::Alignment { .. })
        ));
        assert!(matches!(coverage_audit(&sets, &[], 4, 0.1), Err(Error::LengthMismatch { .. })));
        assert!(matches!(coverage_audit(&[], &[], 4, 0.1), Err(Error::EmptyInput)));
        let unlabelled = ScoreRecord::new("a", None, vec![0.5, 0.5]);
        assert!(matches!(coverage_audit(&sets, &[unlabelled], 2, 0.1), Err(Error::MissingLabel { .. })));
    }

    #[test]
    fn singleton_argmax_coverage_is_accuracy() {
        let recs = vec![
            ScoreRecord::new("a", Some(0), vec![0.6, 0.3, 0.1]),
            ScoreRecord::new("b", Some(2), vec![0.6, 0.3, 0.1]),
            ScoreRecord::new("c", Some(1), vec![0.2, 0.5, 0.3]),
            ScoreRecord::new("d", Some(2), vec![0.1, 0.1, 0.8]),
        ];
        let sets: Vec<_> = recs.iter().map(|r| set(&r.id, &[r.argmax()])).collect();
        let report = coverage_audit(&sets, &recs, 3, 0.1).unwrap();
        assert_eq!(report.coverage, 0.75);
        assert_eq!(argmax_labels(&recs), vec![0, 0, 1, 2]);
    }

    #[test]
    fn hist_csv() {
        let sets = vec![set("a", &[0, 1]), set("b", &[2])];
        let recs = vec![labelled("a", 1), labelled("b", 2)];
        let r = coverage_audit(&sets, &recs, 4, 0.05).unwrap();
        let mut buf = Vec::new();
        r.write_hist_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("set_size,count\n0,0\n1,1\n2,1\n"));
    }
}
