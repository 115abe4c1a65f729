//! Plain-text matrix dumps: a `# rows cols` header line followed by one
//! comma-separated line per row.

use std::io::{BufRead, Write};

use super::{MarkovError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixDump {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

pub fn write_matrix_csv<W: Write>(mut w: W, rows: usize, cols: usize, values: &[f64]) -> Result<()> {
    if values.len() != rows * cols {
        return Err(MarkovError::BadLength {
            expected: rows * cols,
            got: values.len(),
        });
    }
    writeln!(w, "# {rows} {cols}")?;
    for r in 0..rows {
        let line: Vec<String> = values[r * cols..(r + 1) * cols]
            .iter()
            .map(|v| format!("{v}"))
            .collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

pub fn read_matrix_csv<R: BufRead>(r: R) -> Result<MatrixDump> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| MarkovError::Parse("empty input".into()))??;
    let dims: Vec<usize> = header
        .strip_prefix('#')
        .ok_or_else(|| MarkovError::Parse(format!("bad header {header:?}")))?
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| MarkovError::Parse(format!("bad dimension {s:?}"))))
        .collect::<Result<_>>()?;
    let [rows, cols] = dims[..] else {
        return Err(MarkovError::Parse(format!("header needs two dimensions: {header:?}")));
    };
    let mut values = Vec::with_capacity(rows * cols);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let before = values.len();
        for tok in line.split(',') {
            let v: f64 = tok
                .trim()
                .parse()
                .map_err(|_| MarkovError::Parse(format!("row {i}: bad value {tok:?}")))?;
            values.push(v);
        }
        if values.len() - before != cols {
            return Err(MarkovError::Parse(format!(
                "row {i} has {} values, expected {cols}",
                values.len() - before
            )));
        }
    }
    if values.len() != rows * cols {
        return Err(MarkovError::Parse(format!(
            "expected {rows} rows, got {}",
            values.len() / cols.max(1)
        )));
    }
    Ok(MatrixDump { rows, cols, values })
}
