//! Score tables and JSON documents on disk.
//!
//! A score table is a UTF-8 CSV with header
//! `id,label,group_<name>...,score_0,...,score_{K-1}`. Columns may appear in
//! any order; every `score_j` for `j < K` must be present exactly once. The
//! label cell may be empty for unlabelled data.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::conformal::{CalibrationModel, ScoreRecord};
use crate::error::{Error, Result};

pub const GROUP_PREFIX: &str = "group_";
pub const SCORE_PREFIX: &str = "score_";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Rescale rows whose scores do not sum to one instead of rejecting them.
    pub renormalize: bool,
    /// Reject rows without a label.
    pub require_labels: bool,
}

struct Layout {
    id: usize,
    label: usize,
    groups: Vec<(String, usize)>,
    scores: Vec<usize>,
}

fn parse_header(path: &Path, header: &csv::StringRecord) -> Result<Layout> {
    let fail = |msg: String| Error::Format {
        path: path.to_path_buf(),
        line: 1,
        msg,
    };
    let mut id = None;
    let mut label = None;
    let mut groups = Vec::new();
    let mut scores: BTreeMap<usize, usize> = BTreeMap::new();
    for (col, name) in header.iter().enumerate() {
        let name = name.trim();
        match name {
            "id" if id.is_none() => id = Some(col),
            "label" if label.is_none() => label = Some(col),
            "id" | "label" => return Err(fail(format!("duplicate column `{name}`"))),
            _ => {
                if let Some(g) = name.strip_prefix(GROUP_PREFIX) {
                    if g.is_empty() || groups.iter().any(|(n, _)| n == g) {
                        return Err(fail(format!("bad or duplicate group column `{name}`")));
                    }
                    groups.push((g.to_string(), col));
                } else if let Some(j) = name.strip_prefix(SCORE_PREFIX) {
                    let j: usize = j.parse().map_err(|_| fail(format!("bad score column `{name}`")))?;
                    if scores.insert(j, col).is_some() {
                        return Err(fail(format!("duplicate column `{name}`")));
                    }
                } else {
                    return Err(fail(format!("unknown column `{name}`")));
                }
            }
        }
    }
    let id = id.ok_or_else(|| fail("missing `id` column".into()))?;
    let label = label.ok_or_else(|| fail("missing `label` column".into()))?;
    let k = scores.len();
    if k < 2 {
        return Err(fail(format!("need at least 2 score columns, found {k}")));
    }
    if scores.keys().copied().ne(0..k) {
        return Err(fail(format!("score columns must be score_0..score_{}", k - 1)));
    }
    Ok(Layout {
        id,
        label,
        groups,
        scores: scores.into_values().collect(),
    })
}

/// Reads and validates a score table.
pub fn load_scores(path: impl AsRef<Path>, options: LoadOptions) -> Result<Vec<ScoreRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header = reader.headers()?.clone();
    let layout = parse_header(path, &header)?;

    let mut seen: HashMap<String, u64> = HashMap::new();
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let fail = |msg: String| Error::Format {
            path: path.to_path_buf(),
            line,
            msg,
        };
        if row.len() != header.len() {
            return Err(fail(format!("expected {} fields, found {}", header.len(), row.len())));
        }
        let id = row[layout.id].to_string();
        if id.is_empty() {
            return Err(fail("empty id".into()));
        }
        if seen.insert(id.clone(), line).is_some() {
            return Err(Error::DuplicateId { id, line });
        }
        let label = match &row[layout.label] {
            "" if options.require_labels => return Err(Error::MissingLabel { id }),
            "" => None,
            s => Some(s.parse::<usize>().map_err(|_| fail(format!("bad label `{s}`")))?),
        };
        let scores = layout
            .scores
            .iter()
            .map(|&c| {
                row[c]
                    .parse::<f64>()
                    .map_err(|_| fail(format!("bad score `{}`", &row[c])))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut record = ScoreRecord::new(id, label, scores);
        for (name, col) in &layout.groups {
            record.groups.insert(name.clone(), row[*col].to_string());
        }
        record.validate(options.renormalize).map_err(|e| match e {
            Error::Validation { id, reason } => Error::Validation {
                id,
                reason: format!("{reason} (line {line})"),
            },
            other => other,
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Writes records as a score table. Group columns are the union of all
/// attributes, in sorted order; all records must share one class count.
pub fn write_scores<W: Write>(out: W, records: &[ScoreRecord]) -> Result<()> {
    let k = records.first().map_or(0, ScoreRecord::n_classes);
    let mut attributes: Vec<&String> = records.iter().flat_map(|r| r.groups.keys()).collect();
    attributes.sort();
    attributes.dedup();

    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend(attributes.iter().map(|a| format!("{GROUP_PREFIX}{a}")));
    header.extend((0..k).map(|j| format!("{SCORE_PREFIX}{j}")));
    w.write_record(&header)?;
    for r in records {
        if r.n_classes() != k {
            return Err(Error::DimensionMismatch {
                id: r.id.clone(),
                expected: k,
                found: r.n_classes(),
            });
        }
        let mut row = vec![r.id.clone(), r.label.map(|l| l.to_string()).unwrap_or_default()];
        row.extend(attributes.iter().map(|a| r.groups.get(*a).cloned().unwrap_or_default()));
        // `Display` for f64 is the shortest string that parses back exactly
        row.extend(r.scores.iter().map(|s| s.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn save_scores(path: impl AsRef<Path>, records: &[ScoreRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_scores(BufWriter::new(file), records)
}

/// Pretty JSON with a trailing newline.
pub fn save_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<CalibrationModel> {
    let model: CalibrationModel = load_json(path)?;
    crate::conformal::check_alpha(model.alpha)?;
    if model.n_classes < 2 {
        return Err(Error::InvalidClassCount(model.n_classes));
    }
    Ok(model)
}

pub fn save_model(path: impl AsRef<Path>, model: &CalibrationModel) -> Result<()> {
    save_json(path, model)
}
