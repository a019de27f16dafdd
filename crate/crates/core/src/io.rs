//! Plain-text matrix files and atomic writes.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Headerless CSV with Rust's shortest round-trip float formatting.
pub fn matrix_to_csv(m: &Array2<f64>) -> String {
    let mut out = String::with_capacity(m.len() * 20);
    for row in m.rows() {
        let mut first = true;
        for v in row {
            if !first {
                out.push(',');
            }
            first = false;
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    out
}

pub fn matrix_from_csv(text: &str) -> Result<Array2<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|t| {
                t.trim().parse::<f64>().map_err(|e| {
                    Error::Dataset(format!("line {}: cannot parse `{t}`: {e}", lineno + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Dataset(format!(
                    "line {}: expected {} columns, found {}",
                    lineno + 1,
                    first.len(),
                    row.len()
                )));
            }
        }
        rows.push(row);
    }
    let ncols = rows.first().map_or(0, Vec::len);
    let nrows = rows.len();
    Array2::from_shape_vec((nrows, ncols), rows.into_iter().flatten().collect())
        .map_err(|e| Error::Dataset(e.to_string()))
}

/// Writes `bytes` to a sibling temporary file and renames it into place, so
/// readers never observe a partially written `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Dataset(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn csv_preserves_full_precision() {
        let m = array![[0.1 + 0.2, -1.0 / 3.0], [1e-300, 2.5]];
        let back = matrix_from_csv(&matrix_to_csv(&m)).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn ragged_csv_is_rejected() {
        assert!(matrix_from_csv("1,2\n3\n").is_err());
        assert!(matrix_from_csv("1,x\n").is_err());
    }
}
