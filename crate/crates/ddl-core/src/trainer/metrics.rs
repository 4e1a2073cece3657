//! Append-only metrics CSV with a fixed header:
//! `step,train_loss,val_loss,lr,grad_norm,mean_beta_0..L-1,wall_ms`.
//! `val_loss` is empty except on evaluation steps; the gate columns are
//! empty for purely additive runs.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::Result;

#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
    pub grad_norm: f64,
    pub mean_beta: Vec<f64>,
    pub wall_ms: f64,
}

#[derive(Debug)]
pub struct MetricsWriter {
    path: PathBuf,
    file: std::fs::File,
    n_layers: usize,
}

impl MetricsWriter {
    pub fn create(path: &Path, n_layers: usize) -> Result<Self> {
        let mut file = std::fs::File::create(path)?;
        let mut header = String::from("step,train_loss,val_loss,lr,grad_norm");
        for l in 0..n_layers {
            header.push_str(&format!(",mean_beta_{l}"));
        }
        header.push_str(",wall_ms\n");
        file.write_all(header.as_bytes())?;
        Ok(MetricsWriter { path: path.to_path_buf(), file, n_layers })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        let mut line = format!(
            "{},{},{},{},{}",
            row.step,
            row.train_loss,
            row.val_loss.map(|v| v.to_string()).unwrap_or_default(),
            row.lr,
            row.grad_norm
        );
        for l in 0..self.n_layers {
            match row.mean_beta.get(l) {
                Some(b) => line.push_str(&format!(",{b}")),
                None => line.push(','),
            }
        }
        line.push_str(&format!(",{}\n", row.wall_ms));
        self.file.write_all(line.as_bytes())?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.file.flush()?;
        Ok(())
    }
}

/// Drop the wall-clock column from a metrics CSV line (comparisons across
/// runs must ignore timing).
pub fn strip_wall_ms(line: &str) -> &str {
    match line.rfind(',') {
        Some(idx) => &line[..idx],
        None => line,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_rows_have_fixed_arity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut w = MetricsWriter::create(&path, 2).unwrap();
        w.append(&MetricsRow {
            step: 0,
            train_loss: 5.5,
            val_loss: None,
            lr: 0.0,
            grad_norm: 1.25,
            mean_beta: vec![1.0, 0.99],
            wall_ms: 12.0,
        })
        .unwrap();
        w.append(&MetricsRow {
            step: 1,
            train_loss: 5.4,
            val_loss: Some(5.45),
            lr: 1e-5,
            grad_norm: 1.5,
            mean_beta: vec![],
            wall_ms: 11.0,
        })
        .unwrap();
        w.flush().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,train_loss,val_loss,lr,grad_norm,mean_beta_0,mean_beta_1,wall_ms");
        for line in &lines {
            assert_eq!(line.matches(',').count(), 7, "arity drift in {line}");
        }
        assert!(lines[1].starts_with("0,5.5,,0,1.25,1,0.99,"));
        assert!(lines[2].starts_with("1,5.4,5.45,0.00001,1.5,,,"));
    }

    #[test]
    fn strip_wall_ms_removes_last_column() {
        assert_eq!(strip_wall_ms("1,2,3,4.5"), "1,2,3");
        assert_eq!(strip_wall_ms("nocomma"), "nocomma");
    }
}
