//! Whitespace-delimited matrix files: `N p` on the first line, then `N` rows
//! of `p` decimals.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::CliError;

pub fn parse_matrix(text: &str) -> Result<DMatrix<f64>, CliError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| CliError::Parse("empty matrix file".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| CliError::Parse(format!("bad dimension `{t}`"))))
        .collect::<Result<_, _>>()?;
    let [n, p] = dims[..] else {
        return Err(CliError::Parse(format!("expected `N p` header, got `{header}`")));
    };
    if n == 0 || p == 0 {
        return Err(CliError::Parse(format!("matrix dimensions must be positive, got {n} x {p}")));
    }
    let mut values = Vec::with_capacity(n * p);
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let before = values.len();
        for t in line.split_whitespace() {
            let v: f64 = t
                .parse()
                .map_err(|_| CliError::Parse(format!("row {}: bad number `{t}`", i + 1)))?;
            values.push(v);
        }
        if values.len() - before != p {
            return Err(CliError::Parse(format!(
                "row {} has {} entries, expected {p}",
                i + 1,
                values.len() - before
            )));
        }
        rows += 1;
    }
    if rows != n {
        return Err(CliError::Parse(format!("expected {n} rows, found {rows}")));
    }
    Ok(DMatrix::from_row_slice(n, p, &values))
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_matrix(&text).map_err(|e| match e {
        CliError::Parse(m) => CliError::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// An `N × 1` matrix file read as a vector.
pub fn read_vector(path: &Path) -> Result<DVector<f64>, CliError> {
    let m = read_matrix(path)?;
    if m.ncols() != 1 {
        return Err(CliError::Parse(format!(
            "{}: expected a single column, found {}",
            path.display(),
            m.ncols()
        )));
    }
    Ok(m.column(0).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_row_major() {
        let m = parse_matrix("2 3\n1 2 3\n4 5 6\n").unwrap();
        assert_eq!(m[(0, 2)], 3.0);
        assert_eq!(m[(1, 0)], 4.0);
    }

    #[test]
    fn accepts_scientific_notation_and_blank_lines() {
        let m = parse_matrix("\n1 2\n\n1e-3   -2.5E2\n").unwrap();
        assert_eq!(m[(0, 1)], -250.0);
    }

    #[test]
    fn rejects_malformed_files() {
        for bad in ["", "2\n1\n2\n", "2 2\n1 2\n", "1 2\n1 2 3\n", "1 1\nx\n", "0 2\n"] {
            assert!(matches!(parse_matrix(bad), Err(CliError::Parse(_))), "{bad:?}");
        }
    }
}
