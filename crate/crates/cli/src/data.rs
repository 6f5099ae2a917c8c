//! CSV matrices with missing entries.

use std::path::Path;

use nalgebra::DMatrix;
use structsearch::inference::Mask;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("row {row}, column {col}: cannot parse {text:?} as a number")]
    Parse { row: u64, col: usize, text: String },
    #[error("row {row} has {found} fields, expected {expected}")]
    RaggedRows { row: u64, expected: usize, found: usize },
    #[error("no data rows")]
    Empty,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CsvLayout {
    /// Skip the first row.
    pub header: bool,
    /// Skip the first column.
    pub row_names: bool,
}

/// Parses a numeric CSV. Empty cells and the literal `NaN` are unobserved;
/// rows are numbered from 1 as lines of the file.
pub fn parse_matrix(text: &str, layout: CsvLayout) -> Result<(DMatrix<f64>, Mask), DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(layout.header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let skip = usize::from(layout.row_names);
    let mut values = Vec::new();
    let mut observed = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(rows as u64 + 1, |p| p.line());
        let found = record.len().saturating_sub(skip);
        let expected = *width.get_or_insert(found);
        if found != expected {
            return Err(DataError::RaggedRows { row: line, expected, found });
        }
        for (j, cell) in record.iter().enumerate().skip(skip) {
            if cell.is_empty() || cell == "NaN" {
                values.push(0.0);
                observed.push(false);
                continue;
            }
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => {
                    values.push(v);
                    observed.push(true);
                }
                _ => {
                    return Err(DataError::Parse {
                        row: line,
                        col: j + 1,
                        text: cell.to_string(),
                    })
                }
            }
        }
        rows += 1;
    }
    let cols = width.unwrap_or(0);
    if rows == 0 || cols == 0 {
        return Err(DataError::Empty);
    }
    Ok((
        DMatrix::from_row_slice(rows, cols, &values),
        Mask::from_row_slice(rows, cols, &observed),
    ))
}

pub fn load_matrix(path: &Path, layout: CsvLayout) -> Result<(DMatrix<f64>, Mask), DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_matrix(&text, layout)
}

/// Writes a matrix as CSV using the shortest round-trip float formatting.
pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)?;
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}
