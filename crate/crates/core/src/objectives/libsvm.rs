//! LIBSVM text format reader (`label index:value ...`, 1-based indices).

use std::io::BufRead;

use nalgebra::DMatrix;

use super::ObjectiveError;

/// A labelled dataset with dense features and labels in `{-1, +1}`.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// One row per sample.
    pub features: DMatrix<f64>,
    pub labels: Vec<f64>,
}

impl Dataset {
    pub fn new(features: DMatrix<f64>, labels: Vec<f64>) -> Result<Self, ObjectiveError> {
        if features.nrows() != labels.len() {
            return Err(ObjectiveError::InvalidData(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l != 1.0 && l != -1.0) {
            return Err(ObjectiveError::InvalidData(format!("label {bad} is not +1 or -1")));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Parses LIBSVM records. The two distinct label values are mapped to
/// `-1` (smaller) and `+1` (larger); a third distinct label is an error.
pub fn parse<R: BufRead>(reader: R) -> Result<Dataset, ObjectiveError> {
    let mut raw_labels: Vec<(f64, usize)> = Vec::new();
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut classes: Vec<f64> = Vec::new();
    let mut dim = 0usize;

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| ObjectiveError::Parse { line: lineno, message: e.to_string() })?;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let label_tok = tokens.next().expect("non-empty line has a token");
        let label: f64 = label_tok
            .parse()
            .map_err(|_| ObjectiveError::Parse { line: lineno, message: format!("bad label `{label_tok}`") })?;
        if !label.is_finite() {
            return Err(ObjectiveError::Parse { line: lineno, message: format!("bad label `{label_tok}`") });
        }
        if !classes.contains(&label) {
            if classes.len() == 2 {
                return Err(ObjectiveError::Labels { line: lineno, label: label_tok.to_string() });
            }
            classes.push(label);
        }
        let mut entries = Vec::new();
        let mut last_index = 0usize;
        for tok in tokens {
            let (i, v) = tok.split_once(':').ok_or_else(|| ObjectiveError::Parse {
                line: lineno,
                message: format!("expected index:value, got `{tok}`"),
            })?;
            let index: usize = i
                .parse()
                .map_err(|_| ObjectiveError::Parse { line: lineno, message: format!("bad feature index `{i}`") })?;
            if index == 0 || index <= last_index {
                return Err(ObjectiveError::Parse {
                    line: lineno,
                    message: format!("feature indices must be 1-based and increasing, got {index}"),
                });
            }
            let value: f64 = v
                .parse()
                .map_err(|_| ObjectiveError::Parse { line: lineno, message: format!("bad feature value `{v}`") })?;
            last_index = index;
            dim = dim.max(index);
            entries.push((index - 1, value));
        }
        raw_labels.push((label, lineno));
        rows.push(entries);
    }

    if rows.is_empty() {
        return Err(ObjectiveError::InvalidData("dataset has no samples".into()));
    }
    let low = classes.iter().copied().fold(f64::INFINITY, f64::min);
    let mut features = DMatrix::zeros(rows.len(), dim);
    for (r, entries) in rows.iter().enumerate() {
        for &(c, v) in entries {
            features[(r, c)] = v;
        }
    }
    let labels = raw_labels.iter().map(|&(l, _)| if classes.len() == 2 && l == low { -1.0 } else { 1.0 }).collect();
    Dataset::new(features, labels)
}
