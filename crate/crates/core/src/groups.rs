//! Group-conditional calibration and cohort disparity.
//!
//! Each value of a categorical attribute gets its own conformal quantile, so
//! coverage holds within every cohort rather than only on average. Set sizes
//! are then compared between cohorts with a two-sided permutation test on
//! the difference of means.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{calibrate, predict_batch_with, CalibrationModel, PredictOptions, ScoreRecord};
use crate::error::{Error, Result};
use crate::metrics::{coverage_audit, AuditReport};
use crate::rng::substream;

pub const DEFAULT_MIN_GROUP_SIZE: usize = 30;
pub const DEFAULT_PERMUTATIONS: usize = 10_000;

fn group_of<'a>(record: &'a ScoreRecord, attribute: &str) -> Result<&'a str> {
    record
        .groups
        .get(attribute)
        .map(String::as_str)
        .ok_or_else(|| Error::MissingGroup {
            id: record.id.clone(),
            attribute: attribute.to_string(),
        })
}

/// Splits records by the value of `attribute`, keeping input order within
/// each group.
pub fn partition_by_group<'a>(
    records: &'a [ScoreRecord],
    attribute: &str,
) -> Result<BTreeMap<String, Vec<&'a ScoreRecord>>> {
    let mut out: BTreeMap<String, Vec<&ScoreRecord>> = BTreeMap::new();
    for r in records {
        out.entry(group_of(r, attribute)?.to_string()).or_default().push(r);
    }
    Ok(out)
}

/// Calibrates one model per value of `attribute`.
pub fn group_calibrate(
    records: &[ScoreRecord],
    alpha: f64,
    attribute: &str,
    min_group_size: usize,
) -> Result<BTreeMap<String, CalibrationModel>> {
    if records.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    partition_by_group(records, attribute)?
        .into_iter()
        .map(|(group, members)| {
            if members.len() < min_group_size {
                return Err(Error::GroupTooSmall {
                    group,
                    size: members.len(),
                    min: min_group_size,
                });
            }
            let owned: Vec<ScoreRecord> = members.into_iter().cloned().collect();
            Ok((group, calibrate(&owned, alpha)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisparityTest {
    pub mean_diff: f64,
    pub p_value: f64,
    pub n_permutations: usize,
    pub seed: u64,
}

/// Two-sided permutation test for a difference in means.
///
/// `mean_diff = mean(a) - mean(b)` and
/// `p = (1 + #{|permuted diff| >= |observed diff|}) / (n_permutations + 1)`.
/// Permutation `t` shuffles with stream `t` of `seed`; the pooled sample is
/// built in a canonical order so that swapping `a` and `b` gives the same
/// p-value.
pub fn disparity_test(a: &[f64], b: &[f64], n_permutations: usize, seed: u64) -> Result<DisparityTest> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySample);
    }
    if n_permutations == 0 {
        return Err(Error::InvalidPermutations);
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let mean_diff = mean(a) - mean(b);

    let a_first = match a.len().cmp(&b.len()) {
        std::cmp::Ordering::Equal => a
            .iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .is_none_or(|o| o.is_lt()),
        o => o.is_lt(),
    };
    let (first, second) = if a_first { (a, b) } else { (b, a) };
    let n1 = first.len();
    let n2 = second.len();
    let pool: Vec<f64> = first.iter().chain(second).copied().collect();
    let total: f64 = pool.iter().sum();
    let split_diff = |head_sum: f64| head_sum / n1 as f64 - (total - head_sum) / n2 as f64;

    let observed = split_diff(first.iter().sum()).abs();
    let cutoff = observed - 1e-9 * observed.max(1.0);

    let extreme = (0..n_permutations)
        .into_par_iter()
        .filter(|&t| {
            let mut rng = substream(seed, t as u64);
            let mut shuffled = pool.clone();
            let (head, _) = shuffled.partial_shuffle(&mut rng, n1);
            split_diff(head.iter().sum()).abs() >= cutoff
        })
        .count();

    Ok(DisparityTest {
        mean_diff,
        p_value: (1 + extreme) as f64 / (n_permutations + 1) as f64,
        n_permutations,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub model: CalibrationModel,
    pub audit: AuditReport,
    pub set_size_samples: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupComparison {
    pub group_a: String,
    /// Another group, or `"rest"` for every other group pooled.
    pub group_b: String,
    #[serde(flatten)]
    pub test: DisparityTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub attribute: String,
    pub alpha: f64,
    pub per_group: BTreeMap<String, GroupEntry>,
    pub tests: Vec<GroupComparison>,
}

impl GroupReport {
    /// Tidy `group,set_size` rows, one per test example.
    pub fn write_samples_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["group", "set_size"])?;
        for (group, entry) in &self.per_group {
            for size in &entry.set_size_samples {
                w.write_record([group.as_str(), &size.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupAuditOptions {
    pub n_permutations: usize,
    pub seed: u64,
    pub predict: PredictOptions,
}

impl Default for GroupAuditOptions {
    fn default() -> Self {
        GroupAuditOptions {
            n_permutations: DEFAULT_PERMUTATIONS,
            seed: 0,
            predict: PredictOptions::default(),
        }
    }
}

/// Predicts and audits each cohort with its own model, then tests set-size
/// differences: every pair of groups, plus each group against the rest when
/// there are more than two groups.
pub fn group_audit(
    records: &[ScoreRecord],
    models: &BTreeMap<String, CalibrationModel>,
    alpha: f64,
    attribute: &str,
    options: GroupAuditOptions,
) -> Result<GroupReport> {
    let mut per_group = BTreeMap::new();
    for (group, members) in partition_by_group(records, attribute)? {
        let model = models
            .get(&group)
            .ok_or_else(|| Error::UnknownGroup { group: group.clone() })?;
        let owned: Vec<ScoreRecord> = members.into_iter().cloned().collect();
        let sets = predict_batch_with(&owned, model, options.predict)?;
        let audit = coverage_audit(&sets, &owned, model.n_classes, alpha)?;
        let set_size_samples = sets.iter().map(|s| s.len()).collect();
        per_group.insert(
            group,
            GroupEntry {
                model: model.clone(),
                audit,
                set_size_samples,
            },
        );
    }

    let samples: Vec<(&String, Vec<f64>)> = per_group
        .iter()
        .map(|(g, e)| (g, e.set_size_samples.iter().map(|&s| s as f64).collect()))
        .collect();
    let mut tests = Vec::new();
    for (i, (ga, sa)) in samples.iter().enumerate() {
        for (gb, sb) in &samples[i + 1..] {
            tests.push(GroupComparison {
                group_a: (*ga).clone(),
                group_b: (*gb).clone(),
                test: disparity_test(sa, sb, options.n_permutations, options.seed)?,
            });
        }
    }
    if samples.len() > 2 {
        for (i, (ga, sa)) in samples.iter().enumerate() {
            let rest: Vec<f64> = samples
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .flat_map(|(_, (_, s))| s.iter().copied())
                .collect();
            tests.push(GroupComparison {
                group_a: (*ga).clone(),
                group_b: "rest".into(),
                test: disparity_test(sa, &rest, options.n_permutations, options.seed)?,
            });
        }
    }

    Ok(GroupReport {
        attribute: attribute.to_string(),
        alpha,
        per_group,
        tests,
    })
}

/// Ascending cut points used to turn a numeric attribute into categories.
#[derive(Debug, Clone, PartialEq)]
pub struct BinEdges(Vec<f64>);

impl BinEdges {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.is_empty() {
            return Err(Error::InvalidConfig("bin edges must not be empty".into()));
        }
        if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(
                "bin edges must be finite and strictly increasing".into(),
            ));
        }
        Ok(BinEdges(edges))
    }

    /// Label of the half-open bin containing `value`.
    pub fn label(&self, value: f64) -> String {
        let edges = &self.0;
        let idx = edges.partition_point(|&e| e <= value);
        if idx == 0 {
            format!("<{}", edges[0])
        } else if idx == edges.len() {
            format!(">={}", edges[idx - 1])
        } else {
            format!("[{},{})", edges[idx - 1], edges[idx])
        }
    }

    /// Replaces the numeric `attribute` of every record by its bin label.
    pub fn apply(&self, records: &mut [ScoreRecord], attribute: &str) -> Result<()> {
        for r in records.iter_mut() {
            let raw = group_of(r, attribute)?;
            let value: f64 = raw.trim().parse().map_err(|_| Error::Validation {
                id: r.id.clone(),
                reason: format!("group `{attribute}` value `{raw}` is not numeric"),
            })?;
            let label = self.label(value);
            r.groups.insert(attribute.to_string(), label);
        }
        Ok(())
    }
}
