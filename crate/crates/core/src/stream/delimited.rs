//! Comma-separated numeric tables with an optional header and `label` column.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

use super::Dataset;

pub fn parse(text: &str) -> Result<Dataset> {
    let mut label_col = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    let mut offset = 0usize;
    for (lineno, line) in text.split_inclusive('\n').enumerate() {
        let start = offset;
        offset += line.len();
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if lineno == 0 && fields.iter().any(|f| f.parse::<f64>().is_err()) {
            label_col = fields.iter().position(|f| f.eq_ignore_ascii_case("label"));
            width = Some(fields.len());
            continue;
        }
        let w = *width.get_or_insert(fields.len());
        if fields.len() != w {
            return Err(Error::Ingestion {
                offset: start as u64,
                message: format!(
                    "line {} has {} fields, expected {w}",
                    lineno + 1,
                    fields.len()
                ),
            });
        }
        let mut row = Vec::with_capacity(w);
        for (i, f) in fields.iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| Error::Ingestion {
                offset: start as u64,
                message: format!("line {}: `{f}` is not a number", lineno + 1),
            })?;
            if Some(i) == label_col {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(Error::Ingestion {
                        offset: start as u64,
                        message: format!("line {}: label `{f}` is not a class index", lineno + 1),
                    });
                }
                labels.push(v as usize);
            } else {
                row.push(v);
            }
        }
        rows.push(row);
    }
    let samples = if rows.is_empty() {
        DenseMatrix::zeros(0, width.map_or(0, |w| w - label_col.is_some() as usize))
    } else {
        DenseMatrix::from_rows(&rows)?
    };
    Ok(Dataset {
        samples,
        labels: label_col.map(|_| labels),
    })
}

pub fn read(path: &Path) -> Result<Dataset> {
    parse(&std::fs::read_to_string(path)?)
}

pub fn write(dataset: &Dataset) -> String {
    let d = dataset.samples.cols();
    let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    if dataset.labels.is_some() {
        header.push("label".into());
    }
    let mut out = header.join(",");
    out.push('\n');
    for (i, row) in dataset.samples.row_iter().enumerate() {
        let mut fields: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        if let Some(l) = &dataset.labels {
            fields.push(l[i].to_string());
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}
