//! CSV output with a provenance comment line.
//!
//! Numbers are written in scientific notation with 17 significant digits,
//! which round-trips every `f64` exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// One CSV cell.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

pub fn format_num(v: f64) -> String {
    format!("{v:.16e}")
}

/// `# mfflow <version> seed=<seed> scenario=<name>`.
pub fn header_comment(seed: u64, scenario: &str) -> String {
    format!("# mfflow {} seed={seed} scenario={scenario}", env!("CARGO_PKG_VERSION"))
}

/// Renders a table; text cells must not contain commas or newlines.
pub fn render_csv(seed: u64, scenario: &str, columns: &[&str], rows: &[Vec<Cell>]) -> Result<String> {
    let mut out = header_comment(seed, scenario);
    out.push('\n');
    out.push_str(&columns.join(","));
    out.push('\n');
    for row in rows {
        if row.len() != columns.len() {
            return Err(Error::InvalidArgument(format!(
                "row has {} cells, table has {} columns",
                row.len(),
                columns.len()
            )));
        }
        for (i, cell) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            match cell {
                Cell::Num(v) => out.push_str(&format_num(*v)),
                Cell::Int(v) => {
                    let _ = write!(out, "{v}");
                }
                Cell::Text(s) => {
                    if s.contains([',', '\n', '\r']) {
                        return Err(Error::InvalidArgument(format!("text cell '{s}' needs quoting")));
                    }
                    out.push_str(s);
                }
            }
        }
        out.push('\n');
    }
    Ok(out)
}

/// Numeric table shorthand.
pub fn numeric_rows(rows: Vec<Vec<f64>>) -> Vec<Vec<Cell>> {
    rows.into_iter().map(|r| r.into_iter().map(Cell::Num).collect()).collect()
}

pub fn write_csv(
    path: &Path,
    seed: u64,
    scenario: &str,
    columns: &[&str],
    rows: &[Vec<Cell>],
) -> Result<()> {
    let text = render_csv(seed, scenario, columns, rows)?;
    std::fs::write(path, text)
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, -1.0 / 3.0, 1e-300, 6.02214076e23, f64::MIN_POSITIVE, 0.0] {
            assert_eq!(format_num(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn layout() {
        let rows = vec![vec![Cell::from("mass"), 1.0.into(), 3usize.into()]];
        let text = render_csv(7, "pure-diffusion", &["check", "value", "n"], &rows).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("# mfflow ") && lines[0].ends_with("seed=7 scenario=pure-diffusion"));
        assert_eq!(lines[1], "check,value,n");
        assert_eq!(lines[2], "mass,1.0000000000000000e0,3");
        assert!(render_csv(7, "x", &["a"], &[vec![Cell::from("a,b")]]).is_err());
        assert!(render_csv(7, "x", &["a", "b"], &[vec![Cell::from(1.0)]]).is_err());
    }
}
