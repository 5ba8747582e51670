//! UCI HAR loader: whitespace-delimited text, 561 features per row,
//! labels 1..=6 remapped to 0..=5, features standardized with train-set
//! statistics.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Dataset;

pub const HAR_FEATURES: usize = 561;

/// Load the HAR train/test splits from `dir`. Both the flat layout
/// (`X_train.txt` next to `y_train.txt`) and the original archive layout
/// (`train/X_train.txt`, `test/X_test.txt`) are accepted.
pub fn load_har(dir: &Path) -> Result<(Dataset, Dataset)> {
    let x_train = find(dir, "train", "X_train.txt")?;
    let y_train = find(dir, "train", "y_train.txt")?;
    let x_test = find(dir, "test", "X_test.txt")?;
    let y_test = find(dir, "test", "y_test.txt")?;

    let (mut train_rows, n_train) = read_features(&x_train)?;
    let train_labels = read_labels(&y_train, n_train)?;
    let (mut test_rows, n_test) = read_features(&x_test)?;
    let test_labels = read_labels(&y_test, n_test)?;

    // Per-feature z-scoring with train-set statistics (population variance).
    let mut mean = vec![0.0f64; HAR_FEATURES];
    for row in train_rows.chunks_exact(HAR_FEATURES) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n_train as f64;
    }
    let mut var = vec![0.0f64; HAR_FEATURES];
    for row in train_rows.chunks_exact(HAR_FEATURES) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|v| {
            let s = (v / n_train as f64).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0 // constant feature: leave it centered at zero
            }
        })
        .collect();
    for rows in [&mut train_rows, &mut test_rows] {
        for row in rows.chunks_exact_mut(HAR_FEATURES) {
            for ((v, m), s) in row.iter_mut().zip(&mean).zip(&std) {
                *v = (*v - m) / s;
            }
        }
    }

    let train = Dataset::new(
        "har",
        Tensor::new(vec![n_train, HAR_FEATURES], train_rows)?,
        train_labels,
        6,
    )?;
    let test = Dataset::new(
        "har",
        Tensor::new(vec![n_test, HAR_FEATURES], test_rows)?,
        test_labels,
        6,
    )?;
    Ok((train, test))
}

fn find(dir: &Path, split: &str, file: &str) -> Result<PathBuf> {
    let flat = dir.join(file);
    if flat.is_file() {
        return Ok(flat);
    }
    let nested = dir.join(split).join(file);
    if nested.is_file() {
        return Ok(nested);
    }
    Err(Error::DataLoad {
        file: flat.display().to_string(),
        reason: format!("not found (also tried {})", nested.display()),
    })
}

fn read_features(path: &Path) -> Result<(Vec<f64>, usize)> {
    let name = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::DataLoad {
        file: name.clone(),
        reason: e.to_string(),
    })?;
    let mut values = Vec::new();
    let mut rows = 0usize;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::DataLoad {
            file: name.clone(),
            reason: format!("read error at row {i}: {e}"),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let start = values.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| Error::DataLoad {
                file: name.clone(),
                reason: format!("row {i}: '{tok}' is not a number"),
            })?;
            values.push(v);
        }
        let got = values.len() - start;
        if got != HAR_FEATURES {
            return Err(Error::DataLoad {
                file: name,
                reason: format!("row {i} has {got} fields, expected {HAR_FEATURES}"),
            });
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::DataLoad {
            file: name,
            reason: "no rows".into(),
        });
    }
    Ok((values, rows))
}

fn read_labels(path: &Path, expected_rows: usize) -> Result<Vec<usize>> {
    let name = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::DataLoad {
        file: name.clone(),
        reason: e.to_string(),
    })?;
    let mut labels = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::DataLoad {
            file: name.clone(),
            reason: format!("read error at row {i}: {e}"),
        })?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let v: usize = t.parse().map_err(|_| Error::DataLoad {
            file: name.clone(),
            reason: format!("row {i}: '{t}' is not a label"),
        })?;
        if !(1..=6).contains(&v) {
            return Err(Error::DataLoad {
                file: name,
                reason: format!("row {i}: label {v} outside 1..=6"),
            });
        }
        labels.push(v - 1);
    }
    if labels.len() != expected_rows {
        return Err(Error::DataLoad {
            file: name,
            reason: format!("{} labels for {expected_rows} feature rows", labels.len()),
        });
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_rows(path: &Path, rows: &[Vec<f64>]) {
        let mut f = File::create(path).unwrap();
        for row in rows {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.6e}")).collect();
            writeln!(f, " {}", line.join(" ")).unwrap();
        }
    }

    #[test]
    fn loads_and_relabels() {
        let dir = tempfile::tempdir().unwrap();
        let mk_row = |v: f64| (0..HAR_FEATURES).map(|j| v + j as f64 * 0.001).collect::<Vec<_>>();
        write_rows(&dir.path().join("X_train.txt"), &[mk_row(0.1), mk_row(0.5), mk_row(-0.2)]);
        write_rows(&dir.path().join("X_test.txt"), &[mk_row(0.3)]);
        std::fs::write(dir.path().join("y_train.txt"), "1\n6\n3\n").unwrap();
        std::fs::write(dir.path().join("y_test.txt"), "2\n").unwrap();

        let (train, test) = load_har(dir.path()).unwrap();
        assert_eq!(train.len(), 3);
        assert_eq!(test.len(), 1);
        assert_eq!(train.labels(), &[0, 5, 2]);
        assert_eq!(test.labels(), &[1]);
        assert_eq!(train.features().shape(), &[3, HAR_FEATURES]);
        // Standardized: each train column has zero mean.
        let d = train.features().data();
        let col0_mean = (d[0] + d[HAR_FEATURES] + d[2 * HAR_FEATURES]) / 3.0;
        assert!(col0_mean.abs() < 1e-12);
    }

    #[test]
    fn wrong_field_count_names_row() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("X_train.txt"), "0.5 0.25\n").unwrap();
        std::fs::write(dir.path().join("y_train.txt"), "1\n").unwrap();
        std::fs::write(dir.path().join("X_test.txt"), "0.5\n").unwrap();
        std::fs::write(dir.path().join("y_test.txt"), "1\n").unwrap();
        let err = load_har(dir.path()).unwrap_err().to_string();
        assert!(err.contains("row 0"), "{err}");
        assert!(err.contains("561"), "{err}");
    }
}
