//! Plain-text input and output: two-column tables and CSV writers with
//! 17 significant digits so that golden files are stable.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{invalid, Result};

/// Format a float with 17 significant digits (round-trip exact).
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "NaN".to_string()
    } else if v > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

/// Read a headerless two-column CSV, `#` comments allowed. Abscissae must be
/// strictly increasing.
pub fn read_two_column_csv(path: impl AsRef<Path>) -> Result<(Vec<f64>, Vec<f64>)> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(false)
        .from_path(path)?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() != 2 {
            return Err(invalid(format!(
                "{}: record {} has {} fields, expected 2",
                path.display(),
                line + 1,
                rec.len()
            )));
        }
        let parse = |s: &str| {
            s.parse::<f64>().map_err(|_| {
                invalid(format!("{}: record {}: cannot parse {s:?}", path.display(), line + 1))
            })
        };
        xs.push(parse(&rec[0])?);
        ys.push(parse(&rec[1])?);
    }
    check_increasing(&xs, &path.display().to_string())?;
    Ok((xs, ys))
}

pub(crate) fn check_increasing(xs: &[f64], what: &str) -> Result<()> {
    if xs.len() < 2 {
        return Err(invalid(format!("{what}: need at least two rows")));
    }
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(invalid(format!("{what}: non-finite abscissa")));
    }
    if xs.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid(format!("{what}: abscissae must be strictly increasing")));
    }
    Ok(())
}

/// Write named columns of equal length as CSV with a header row.
pub fn write_columns(path: impl AsRef<Path>, names: &[&str], columns: &[&[f64]]) -> Result<()> {
    assert_eq!(names.len(), columns.len());
    let n = columns.first().map_or(0, |c| c.len());
    assert!(columns.iter().all(|c| c.len() == n), "ragged columns");
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", names.join(","))?;
    let mut line = String::new();
    for i in 0..n {
        line.clear();
        for (j, c) in columns.iter().enumerate() {
            if j > 0 {
                line.push(',');
            }
            line.push_str(&fmt_f64(c[i]));
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Write a row-major matrix as headerless CSV.
pub fn write_matrix(path: impl AsRef<Path>, values: &[f64], ncols: usize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let mut line = String::new();
    for row in values.chunks(ncols) {
        line.clear();
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                line.push(',');
            }
            line.push_str(&fmt_f64(*v));
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}
