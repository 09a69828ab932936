//! Delimited matrix files.
//!
//! Tab or comma separated, chosen from the first line. `NA` and `NaN` in
//! any case mark a missing entry. There is no header row.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedMatrix {
    /// Missing entries hold zero.
    pub values: DMatrix<f64>,
    pub missing: DMatrix<bool>,
}

impl LoadedMatrix {
    pub fn any_missing(&self) -> bool {
        self.missing.iter().any(|&m| m)
    }

    /// The mask in the form the fitters take: `None` when complete.
    pub fn mask(&self) -> Option<DMatrix<bool>> {
        self.any_missing().then(|| self.missing.clone())
    }
}

fn is_missing_token(t: &str) -> bool {
    t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan")
}

pub fn parse_matrix(text: &str, origin: &str) -> Result<LoadedMatrix> {
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let delimiter = if first.contains('\t') { b'\t' } else { b',' };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut cells: Vec<Option<f64>> = Vec::new();
    let mut ncols = None;
    let mut nrows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| Error::validation(format!("{origin}: {e}")))?;
        let line = record.position().map_or(nrows + 1, |p| p.line() as usize);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        match ncols {
            None => ncols = Some(record.len()),
            Some(n) if n != record.len() => {
                return Err(Error::validation(format!(
                    "{origin}:{line}: ragged row with {} fields, expected {n}",
                    record.len()
                )))
            }
            _ => {}
        }
        for (col, token) in record.iter().enumerate() {
            if is_missing_token(token) {
                cells.push(None);
                continue;
            }
            let v: f64 = token.parse().map_err(|_| {
                Error::validation(format!("{origin}:{line}: field {}: not a number: {token:?}", col + 1))
            })?;
            if !v.is_finite() {
                return Err(Error::validation(format!("{origin}:{line}: field {}: non-finite value", col + 1)));
            }
            cells.push(Some(v));
        }
        nrows += 1;
    }
    let ncols = ncols.ok_or_else(|| Error::validation(format!("{origin}: empty matrix file")))?;
    if cells.iter().all(Option::is_none) {
        return Err(Error::validation(format!("{origin}: every entry is missing")));
    }
    Ok(LoadedMatrix {
        values: DMatrix::from_row_iterator(nrows, ncols, cells.iter().map(|c| c.unwrap_or(0.0))),
        missing: DMatrix::from_row_iterator(nrows, ncols, cells.iter().map(Option::is_none)),
    })
}

pub fn load_matrix(path: &Path) -> Result<LoadedMatrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix(&text, &path.display().to_string())
}

/// Tab-separated text; `{}` formatting of `f64` is the shortest string that
/// parses back to the same value.
pub fn format_matrix(x: &DMatrix<f64>, missing: Option<&DMatrix<bool>>) -> String {
    let mut out = String::with_capacity(x.len() * 20);
    for r in 0..x.nrows() {
        for c in 0..x.ncols() {
            if c > 0 {
                out.push('\t');
            }
            if missing.is_some_and(|m| m[(r, c)]) {
                out.push_str("NA");
            } else {
                out.push_str(&x[(r, c)].to_string());
            }
        }
        out.push('\n');
    }
    out
}

pub fn write_matrix(path: &Path, x: &DMatrix<f64>, missing: Option<&DMatrix<bool>>) -> Result<()> {
    fs::write(path, format_matrix(x, missing)).map_err(|e| Error::io(path, e))
}

/// A 0/1 mask file, 1 marking a missing entry.
pub fn load_mask(path: &Path) -> Result<DMatrix<bool>> {
    let m = load_matrix(path)?;
    if m.any_missing() {
        return Err(Error::validation(format!("{}: mask files may not contain NA", path.display())));
    }
    if let Some(v) = m.values.iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(Error::validation(format!("{}: mask entries must be 0 or 1, got {v}", path.display())));
    }
    Ok(m.values.map(|v| v == 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comma_row_with_missing() {
        let m = parse_matrix("1e3, NA, -2.5\n0,nan,4\n", "t").unwrap();
        assert_eq!(m.values.row(0).iter().copied().collect::<Vec<_>>(), vec![1000.0, 0.0, -2.5]);
        assert!(m.missing[(0, 1)] && m.missing[(1, 1)] && !m.missing[(0, 0)]);
    }

    #[test]
    fn tab_detection_and_errors() {
        let m = parse_matrix("1\t2\n3\t4\n", "t").unwrap();
        assert_eq!(m.values, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        assert!(m.mask().is_none());
        assert!(parse_matrix("NA,na\nNaN,NAN\n", "t").is_err());
        let ragged = parse_matrix("1,2\n3\n", "f.csv").unwrap_err().to_string();
        assert!(ragged.contains("f.csv:2"), "{ragged}");
        assert!(parse_matrix("1,x\n", "t").is_err());
        assert!(parse_matrix("1,inf\n", "t").is_err());
        assert!(parse_matrix("", "t").is_err());
    }

    #[test]
    fn round_trip_is_exact() {
        let x = DMatrix::from_fn(4, 3, |r, c| ((r * 7 + c) as f64).sin() * 1e-3 + 1.0 / 3.0 * c as f64);
        let mut missing = DMatrix::from_element(4, 3, false);
        missing[(2, 1)] = true;
        let back = parse_matrix(&format_matrix(&x, Some(&missing)), "t").unwrap();
        assert_eq!(back.missing, missing);
        for r in 0..4 {
            for c in 0..3 {
                if !missing[(r, c)] {
                    assert_eq!(back.values[(r, c)].to_bits(), x[(r, c)].to_bits());
                }
            }
        }
    }
}
