//! Metrics CSV, the norm-profile sidecar, and the run manifest.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::config::TrainConfig;
use crate::error::{Error, Result};

/// Column order of `metrics.csv`.
pub const METRICS_HEADER: &str = "step,wall_ms,train_loss,eval_loss,k_used,vjp_block_calls,scan_calls,cos_sim";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub wall_ms: f64,
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
    /// `None` for backprop.
    pub k_used: Option<usize>,
    pub vjp_block_calls: usize,
    pub scan_calls: usize,
    pub cos_sim: Option<f64>,
    pub norm_profile: Option<Vec<f64>>,
}

fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or(String::new(), ToString::to_string)
}

impl MetricsRow {
    /// One CSV line, empty fields for absent values.
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.3},{},{},{},{},{},{}",
            self.step,
            self.wall_ms,
            self.train_loss,
            opt(&self.eval_loss),
            opt(&self.k_used),
            self.vjp_block_calls,
            self.scan_calls,
            opt(&self.cos_sim),
        )
    }
}

/// Writes `metrics.csv`, `norm_profile.csv`, and `manifest.toml` under one
/// directory. Every row is flushed as it is written.
pub struct MetricsWriter {
    dir: PathBuf,
    metrics: BufWriter<File>,
    profiles: BufWriter<File>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

impl MetricsWriter {
    pub fn create(dir: &Path, config: &TrainConfig) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = dir.join("manifest.toml");
        std::fs::write(&manifest, config.to_toml()).map_err(|e| Error::io(&manifest, e))?;
        let mut w = Self {
            dir: dir.to_path_buf(),
            metrics: create(&dir.join("metrics.csv"))?,
            profiles: create(&dir.join("norm_profile.csv"))?,
        };
        w.line_metrics(METRICS_HEADER)?;
        w.line_profile("step,k,relative_norm")?;
        Ok(w)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn line_metrics(&mut self, line: &str) -> Result<()> {
        let path = self.dir.join("metrics.csv");
        writeln!(self.metrics, "{line}")
            .and_then(|_| self.metrics.flush())
            .map_err(|e| Error::io(path, e))
    }

    fn line_profile(&mut self, line: &str) -> Result<()> {
        let path = self.dir.join("norm_profile.csv");
        writeln!(self.profiles, "{line}")
            .and_then(|_| self.profiles.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.line_metrics(&row.to_csv())?;
        if let Some(p) = &row.norm_profile {
            for (k, v) in p.iter().enumerate() {
                self.line_profile(&format!("{},{k},{v}", row.step))?;
            }
        }
        Ok(())
    }
}

/// Parses a `metrics.csv` back into `(step, train_loss)` pairs.
pub fn read_losses(path: &Path) -> Result<Vec<(usize, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Input(format!("{} is not a metrics file", path.display())));
    }
    lines
        .map(|l| {
            let mut f = l.split(',');
            let step = f.next().and_then(|s| s.parse().ok());
            let loss = f.nth(1).and_then(|s| s.parse().ok());
            step.zip(loss)
                .ok_or_else(|| Error::Input(format!("bad metrics row: {l}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_row_layout() {
        let row = MetricsRow {
            step: 3,
            wall_ms: 1.5,
            train_loss: 0.25,
            eval_loss: None,
            k_used: Some(2),
            vjp_block_calls: 16,
            scan_calls: 3,
            cos_sim: Some(1.0),
            norm_profile: None,
        };
        assert_eq!(row.to_csv(), "3,1.500,0.25,,2,16,3,1");
        assert_eq!(row.to_csv().split(',').count(), METRICS_HEADER.split(',').count());
    }
}
