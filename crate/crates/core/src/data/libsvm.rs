//! LIBSVM text format: `<label> <index>:<value> ...` with 1-based, strictly
//! ascending indices.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::CsrMatrix;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LibsvmData {
    pub features: CsrMatrix,
    pub labels: Vec<f64>,
}

/// Reads a LIBSVM file. The column count is the largest index seen unless
/// `n_override` is given (it must not be smaller).
pub fn parse_libsvm(path: &Path, n_override: Option<usize>) -> Result<LibsvmData> {
    let text = fs::read_to_string(path)?;
    parse_libsvm_str(&text, n_override, path)
}

/// [`parse_libsvm`] on in-memory text; `path` only labels errors.
pub fn parse_libsvm_str(text: &str, n_override: Option<usize>, path: &Path) -> Result<LibsvmData> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut labels = Vec::new();
    let mut indptr = vec![0];
    let mut indices = Vec::new();
    let mut values = Vec::new();
    let mut max_index = 0usize;

    for (lineno, raw) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let label_tok = tokens.next().unwrap_or_default();
        let label: f64 = label_tok
            .parse()
            .map_err(|_| err(line_no, format!("label '{label_tok}' is not a number")))?;
        let mut previous = 0usize;
        for tok in tokens {
            let (idx_tok, val_tok) = tok
                .split_once(':')
                .ok_or_else(|| err(line_no, format!("feature '{tok}' is not of the form index:value")))?;
            let index: usize = idx_tok
                .parse()
                .map_err(|_| err(line_no, format!("feature index '{idx_tok}' is not a positive integer")))?;
            if index == 0 {
                return Err(err(line_no, "feature indices are 1-based; found 0".into()));
            }
            if index <= previous {
                return Err(err(line_no, format!("feature index {index} does not increase (previous {previous})")));
            }
            let value: f64 = val_tok
                .parse()
                .map_err(|_| err(line_no, format!("feature value '{val_tok}' is not a number")))?;
            previous = index;
            max_index = max_index.max(index);
            indices.push(index - 1);
            values.push(value);
        }
        labels.push(label);
        indptr.push(indices.len());
    }

    if labels.is_empty() {
        return Err(err(0, "file contains no examples".into()));
    }
    let ncols = match n_override {
        Some(n) if n < max_index => {
            return Err(err(0, format!("column override {n} is smaller than the largest index {max_index}")));
        }
        Some(n) => n,
        None => max_index,
    };
    let features = CsrMatrix::new(labels.len(), ncols, indptr, indices, values)?;
    Ok(LibsvmData { features, labels })
}

/// Renders in LIBSVM format using the shortest round-tripping decimal form;
/// explicit zeros are skipped.
pub fn render_libsvm(data: &LibsvmData) -> String {
    let mut out = String::new();
    for (i, label) in data.labels.iter().enumerate() {
        let _ = write!(out, "{label}");
        for (j, v) in data.features.row(i) {
            if v != 0.0 {
                let _ = write!(out, " {}:{v}", j + 1);
            }
        }
        out.push('\n');
    }
    out
}

pub fn write_libsvm(path: &Path, data: &LibsvmData) -> Result<()> {
    fs::write(path, render_libsvm(data))?;
    Ok(())
}
