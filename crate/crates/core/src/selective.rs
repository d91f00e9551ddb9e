//! Selective prediction by set size: defer examples whose conformal set is
//! large (or empty) and measure what the retained subset looks like.
//!
//! Empty sets are always deferred. Coverage on the retained subset is a plain
//! fraction conditional on retention and carries no conformal guarantee.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::conformal::{PredictionSet, ScoreRecord};
use crate::error::{Error, Result};
use crate::metrics::{argmax_labels, weighted_kappa, Weighting};

/// Indices into the input, split by the filter.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub retained: Vec<usize>,
    pub deferred: Vec<usize>,
}

impl Partition {
    pub fn retained_ids<'a>(&self, sets: &'a [PredictionSet]) -> Vec<&'a str> {
        self.retained.iter().map(|&i| sets[i].id.as_str()).collect()
    }

    pub fn deferred_ids<'a>(&self, sets: &'a [PredictionSet]) -> Vec<&'a str> {
        self.deferred.iter().map(|&i| sets[i].id.as_str()).collect()
    }
}

/// Keeps examples with `1 <= |set| <= max_size`.
pub fn filter_by_set_size(sets: &[PredictionSet], max_size: usize) -> Result<Partition> {
    if max_size == 0 {
        return Err(Error::InvalidMaxSetSize);
    }
    let mut partition = Partition::default();
    for (i, set) in sets.iter().enumerate() {
        if (1..=max_size).contains(&set.len()) {
            partition.retained.push(i);
        } else {
            partition.deferred.push(i);
        }
    }
    Ok(partition)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub max_set_size: usize,
    pub retained_n: usize,
    pub retained_fraction: f64,
    /// Linear-weighted kappa of argmax labels on the retained subset; `None`
    /// when nothing is retained or agreement is degenerate.
    pub kappa_retained: Option<f64>,
    /// Conditional-on-retention coverage.
    pub coverage_retained: Option<f64>,
    pub violation_retained: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSweep {
    pub alpha: f64,
    pub n: usize,
    pub n_classes: usize,
    /// Ordered from `max_set_size = K` down to 1.
    pub rows: Vec<SweepRow>,
}

impl FilterSweep {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "max_set_size",
            "retained_n",
            "retained_fraction",
            "kappa_retained",
            "coverage_retained",
            "violation_retained",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.max_set_size.to_string(),
                r.retained_n.to_string(),
                r.retained_fraction.to_string(),
                opt(r.kappa_retained),
                opt(r.coverage_retained),
                opt(r.violation_retained),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// Fixed-width table for terminal output.
    pub fn to_table(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        let mut out = format!(
            "{:>12} {:>10} {:>9} {:>8} {:>9} {:>9}\n",
            "max_set_size", "retained", "fraction", "kappa", "coverage", "violation"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:>12} {:>10} {:>9.4} {:>8} {:>9} {:>9}\n",
                r.max_set_size,
                r.retained_n,
                r.retained_fraction,
                opt(r.kappa_retained),
                opt(r.coverage_retained),
                opt(r.violation_retained),
            ));
        }
        out
    }
}

/// Filters at every `max_set_size` from `K` down to 1 and scores the
/// retained subset.
pub fn sweep(
    sets: &[PredictionSet],
    records: &[ScoreRecord],
    n_classes: usize,
    alpha: f64,
) -> Result<FilterSweep> {
    if sets.len() != records.len() {
        return Err(Error::LengthMismatch {
            left: sets.len(),
            right: records.len(),
        });
    }
    if n_classes < 2 {
        return Err(Error::InvalidClassCount(n_classes));
    }
    if sets.is_empty() {
        return Ok(FilterSweep {
            alpha,
            n: 0,
            n_classes,
            rows: Vec::new(),
        });
    }
    let mut truth = Vec::with_capacity(records.len());
    for (set, record) in sets.iter().zip(records) {
        if set.id != record.id {
            return Err(Error::Alignment {
                set_id: set.id.clone(),
                record_id: record.id.clone(),
            });
        }
        truth.push(
            record
                .label
                .ok_or_else(|| Error::MissingLabel { id: record.id.clone() })?,
        );
    }
    let predicted = argmax_labels(records);
    let n = sets.len();

    let rows = (1..=n_classes)
        .rev()
        .map(|max_size| {
            let part = filter_by_set_size(sets, max_size)?;
            let retained_n = part.retained.len();
            let (kappa_retained, coverage_retained) = if retained_n == 0 {
                (None, None)
            } else {
                let a: Vec<usize> = part.retained.iter().map(|&i| predicted[i]).collect();
                let b: Vec<usize> = part.retained.iter().map(|&i| truth[i]).collect();
                let kappa = match weighted_kappa(&a, &b, n_classes, Weighting::Linear) {
                    Ok(k) => Some(k.kappa),
                    Err(Error::DegenerateAgreement) => None,
                    Err(e) => return Err(e),
                };
                let covered = part
                    .retained
                    .iter()
                    .filter(|&&i| sets[i].contains(truth[i]))
                    .count();
                (kappa, Some(covered as f64 / retained_n as f64))
            };
            Ok(SweepRow {
                max_set_size: max_size,
                retained_n,
                retained_fraction: retained_n as f64 / n as f64,
                kappa_retained,
                coverage_retained,
                violation_retained: coverage_retained.map(|c| ((1.0 - alpha) - c).max(0.0)),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(FilterSweep {
        alpha,
        n,
        n_classes,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sized(sizes: &[usize]) -> Vec<PredictionSet> {
        sizes
            .iter()
            .enumerate()
            .map(|(i, &s)| PredictionSet {
                id: format!("s{i}"),
                classes: (0..s).collect(),
                threshold: Some(0.5),
            })
            .collect()
    }

    #[test]
    fn filter_examples() {
        let sets = sized(&[1, 2, 4, 3]);
        let p = filter_by_set_size(&sets, 2).unwrap();
        assert_eq!(p.retained, vec![0, 1]);
        assert_eq!(p.deferred, vec![2, 3]);
        assert_eq!(p.retained_ids(&sets), ["s0", "s1"]);

        let ones = sized(&[1, 1, 1]);
        let p = filter_by_set_size(&ones, 1).unwrap();
        assert_eq!(p.retained.len(), 3);
        assert!(p.deferred.is_empty());

        assert!(matches!(filter_by_set_size(&ones, 0), Err(Error::InvalidMaxSetSize)));
    }

    #[test]
    fn empty_sets_always_deferred() {
        let sets = sized(&[0, 1, 0, 4]);
        let p = filter_by_set_size(&sets, 4).unwrap();
        assert_eq!(p.retained, vec![1, 3]);
        assert_eq!(p.deferred, vec![0, 2]);
    }

    #[test]
    fn perfect_singletons() {
        let records: Vec<_> = (0..8)
            .map(|i| {
                let label = i % 4;
                let mut scores = vec![0.0; 4];
                scores[label] = 1.0;
                ScoreRecord::new(format!("s{i}"), Some(label), scores)
            })
            .collect();
        let sets: Vec<_> = records
            .iter()
            .map(|r| PredictionSet {
                id: r.id.clone(),
                classes: vec![r.label.unwrap()],
                threshold: Some(0.5),
            })
            .collect();
        let sw = sweep(&sets, &records, 4, 0.05).unwrap();
        assert_eq!(sw.rows.len(), 4);
        assert_eq!(sw.rows[0].max_set_size, 4);
        for row in &sw.rows {
            assert_eq!(row.retained_fraction, 1.0);
            assert_eq!(row.kappa_retained, Some(1.0));
            assert_eq!(row.coverage_retained, Some(1.0));
        }
        let table = sw.to_table();
        assert_eq!(table.lines().count(), 5);
    }

    #[test]
    fn empty_sweep() {
        let sw = sweep(&[], &[], 4, 0.05).unwrap();
        assert!(sw.rows.is_empty());
    }
}
