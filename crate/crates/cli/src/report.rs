//! Merging matching CSV reports from several runs.
//!
//! Inputs must share a header and row count. A column is numeric when every
//! non-blank cell in it parses as a number in every input; the remaining
//! columns are keys and must agree row by row. Blank numeric cells must be
//! blank in all inputs. The output keeps the key columns and
//! replaces each numeric column `c` with `c_mean` and `c_var` (sample
//! variance), followed by a `runs` column.

use std::path::{Path, PathBuf};

use actsched::eval::fmt;
use actsched::schedule::io::{csv_writer, read_hash};
use actsched::{Error, Result};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub fn read_table(path: &Path) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let header = rdr
        .headers()
        .map_err(|e| Error::csv(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let rows = rdr
        .records()
        .map(|r| r.map(|r| r.iter().map(str::to_string).collect()).map_err(|e| Error::csv(path, e)))
        .collect::<Result<_>>()?;
    Ok(Table { header, rows })
}

/// Key columns and per-cell mean and sample variance over the tables.
pub fn merge(tables: &[Table]) -> Result<Table> {
    let first = tables.first().ok_or_else(|| Error::Empty("report inputs".into()))?;
    if tables.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: tables.len(),
        });
    }
    for t in &tables[1..] {
        if t.header != first.header || t.rows.len() != first.rows.len() {
            return Err(Error::SchemaMismatch("report inputs differ in header or row count".into()));
        }
    }
    let ncol = first.header.len();
    let numeric: Vec<bool> = (0..ncol)
        .map(|c| {
            tables
                .iter()
                .all(|t| t.rows.iter().all(|r| r.get(c).is_some_and(|v| v.is_empty() || v.parse::<f64>().is_ok())))
                && tables.iter().any(|t| t.rows.iter().any(|r| !r[c].is_empty()))
        })
        .collect();

    let mut header = Vec::new();
    for (c, name) in first.header.iter().enumerate() {
        if numeric[c] {
            header.push(format!("{name}_mean"));
            header.push(format!("{name}_var"));
        } else {
            header.push(name.clone());
        }
    }
    header.push("runs".into());

    let n = tables.len() as f64;
    let mut rows = Vec::with_capacity(first.rows.len());
    for (i, base) in first.rows.iter().enumerate() {
        let mut row = Vec::new();
        for c in 0..ncol {
            if numeric[c] {
                let cells: Vec<&str> = tables.iter().map(|t| t.rows[i][c].as_str()).collect();
                if cells.iter().all(|v| v.is_empty()) {
                    row.extend([String::new(), String::new()]);
                    continue;
                }
                if cells.iter().any(|v| v.is_empty()) {
                    return Err(Error::SchemaMismatch(format!(
                        "row {} column `{}` is blank in some inputs only",
                        i + 1,
                        first.header[c]
                    )));
                }
                let xs: Vec<f64> = cells.iter().map(|v| v.parse().expect("numeric column")).collect();
                let mean = xs.iter().sum::<f64>() / n;
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
                row.push(fmt(mean));
                row.push(fmt(var));
            } else {
                if let Some(t) = tables.iter().find(|t| t.rows[i].get(c) != base.get(c)) {
                    return Err(Error::SchemaMismatch(format!(
                        "row {} column `{}` differs: `{}` vs `{}`",
                        i + 1,
                        first.header[c],
                        base.get(c).map_or("", String::as_str),
                        t.rows[i].get(c).map_or("", String::as_str)
                    )));
                }
                row.push(base.get(c).cloned().unwrap_or_default());
            }
        }
        row.push(tables.len().to_string());
        rows.push(row);
    }
    Ok(Table { header, rows })
}

/// Merges report files; the output hash covers the input hashes in order.
pub fn merge_files(inputs: &[PathBuf], out: &Path) -> Result<()> {
    let tables = inputs.iter().map(|p| read_table(p)).collect::<Result<Vec<_>>>()?;
    let merged = merge(&tables)?;
    let mut h = Sha256::new();
    for p in inputs {
        h.update(read_hash(p)?.unwrap_or_default().as_bytes());
        h.update([0]);
    }
    let hash = hex::encode(h.finalize());
    let mut w = csv_writer(out, Some(&hash))?;
    let e = |err| Error::csv(out, err);
    w.write_record(&merged.header).map_err(e)?;
    for r in &merged.rows {
        w.write_record(r).map_err(e)?;
    }
    w.flush().map_err(|err| Error::io(out, err))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[(&str, &str)]) -> Table {
        Table {
            header: vec!["metric".into(), "value".into()],
            rows: rows.iter().map(|(a, b)| vec![a.to_string(), b.to_string()]).collect(),
        }
    }

    #[test]
    fn mean_and_sample_variance() {
        let m = merge(&[table(&[("a", "1"), ("b", "2")]), table(&[("a", "3"), ("b", "2")])]).unwrap();
        assert_eq!(m.header, ["metric", "value_mean", "value_var", "runs"]);
        assert_eq!(m.rows[0], ["a", "2", "2", "2"]);
        assert_eq!(m.rows[1], ["b", "2", "0", "2"]);
    }

    #[test]
    fn blank_cells_stay_blank() {
        let m = merge(&[table(&[("a", "1"), ("b", "")]), table(&[("a", "3"), ("b", "")])]).unwrap();
        assert_eq!(m.rows[1], ["b", "", "", "2"]);
        assert!(merge(&[table(&[("a", "1"), ("b", "")]), table(&[("a", "3"), ("b", "1")])]).is_err());
    }

    #[test]
    fn rejects_single_or_misaligned_inputs() {
        let a = table(&[("a", "1")]);
        assert!(merge(std::slice::from_ref(&a)).is_err());
        assert!(merge(&[a.clone(), table(&[("b", "1")])]).is_err());
        assert!(merge(&[a.clone(), table(&[("a", "1"), ("b", "1")])]).is_err());
    }
}
