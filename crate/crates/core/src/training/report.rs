use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{Stage, TrainConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::space::{save_checkpoint, Checkpoint};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: Stage,
    pub steps: usize,
    /// Names of the loss components; `total` first.
    pub terms: Vec<String>,
    /// One row per step, aligned with `terms`.
    pub losses: Vec<Vec<f64>>,
    pub metrics: BTreeMap<String, f64>,
    /// Held-out values recorded during training, as `(step, value)`.
    pub traces: BTreeMap<String, Vec<(usize, f64)>>,
    pub checkpoints: Vec<PathBuf>,
    pub wall_seconds: f64,
    pub warnings: Vec<String>,
}

impl StageReport {
    pub fn new(stage: Stage, terms: &[&str]) -> Self {
        let mut names = vec!["total".to_string()];
        names.extend(terms.iter().map(|t| t.to_string()));
        StageReport {
            stage,
            steps: 0,
            terms: names,
            losses: Vec::new(),
            metrics: BTreeMap::new(),
            traces: BTreeMap::new(),
            checkpoints: Vec::new(),
            wall_seconds: 0.0,
            warnings: Vec::new(),
        }
    }

    /// Appends a step; a non-finite entry aborts with that step's index.
    pub fn push_step(&mut self, row: Vec<f64>) -> Result<()> {
        debug_assert_eq!(row.len(), self.terms.len());
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { step: self.losses.len() });
        }
        self.losses.push(row);
        self.steps = self.losses.len();
        Ok(())
    }

    pub fn totals(&self) -> Vec<f64> {
        self.losses.iter().map(|r| r[0]).collect()
    }

    pub fn term(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.terms.iter().position(|t| t == name)?;
        Some(self.losses.iter().map(|r| r[i]).collect())
    }

    /// Mean total loss over the first `k` steps.
    pub fn initial_loss(&self, k: usize) -> Option<f64> {
        window_mean(&self.totals()[..k.min(self.steps)])
    }

    /// Mean total loss over the last `k` steps.
    pub fn final_loss(&self, k: usize) -> Option<f64> {
        let t = self.totals();
        window_mean(&t[t.len() - k.min(t.len())..])
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn trace(&mut self, name: &str, step: usize, value: f64) {
        self.traces.entry(name.to_string()).or_default().push((step, value));
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn window_mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl fmt::Display for StageReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "stage: {}", self.stage)?;
        writeln!(f, "steps: {}", self.steps)?;
        if let (Some(a), Some(b)) = (self.losses.first(), self.losses.last()) {
            for (i, name) in self.terms.iter().enumerate() {
                writeln!(f, "loss.{name}: {:.6} -> {:.6}", a[i], b[i])?;
            }
        }
        for (k, v) in &self.metrics {
            writeln!(f, "{k}: {v:.6}")?;
        }
        for p in &self.checkpoints {
            writeln!(f, "checkpoint: {}", p.display())?;
        }
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        write!(f, "wall_seconds: {:.1}", self.wall_seconds)
    }
}

pub const CONFIG_ECHO: &str = "config.txt";
pub const REPORT_FILE: &str = "report.json";

/// Output directory of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        std::fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        Ok(RunDir { path })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_config(&self, cfg: &TrainConfig) -> Result<()> {
        let p = self.file(CONFIG_ECHO);
        std::fs::write(&p, cfg.to_text()).map_err(|e| Error::io(p, e))
    }

    /// Saves `ckpt` as `<name>.nsck` with the config echoed into its metadata.
    pub fn save_checkpoint<T: Scalar>(&self, name: &str, ckpt: Checkpoint<T>, cfg: &TrainConfig, step: usize) -> Result<PathBuf> {
        let mut ckpt = ckpt.with("stage", cfg.stage).with("step", step);
        for line in cfg.to_text().lines() {
            if let Some((k, v)) = line.split_once(" = ") {
                ckpt.set(&format!("config.{k}"), v);
            }
        }
        let p = self.file(&format!("{name}.nsck"));
        save_checkpoint(&ckpt, &p)?;
        Ok(p)
    }

    pub fn write_report(&self, report: &StageReport) -> Result<PathBuf> {
        let p = self.file(REPORT_FILE);
        std::fs::write(&p, report.to_json()).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steps_track_rows_and_non_finite_aborts() {
        let mut r = StageReport::new(Stage::Seg, &["ce"]);
        r.push_step(vec![2.0, 2.0]).unwrap();
        r.push_step(vec![1.0, 1.0]).unwrap();
        assert_eq!(r.steps, 2);
        assert_eq!(r.initial_loss(1), Some(2.0));
        assert_eq!(r.final_loss(5), Some(1.5));
        assert!(matches!(r.push_step(vec![f64::NAN, 0.0]), Err(Error::NonFiniteLoss { step: 2 })));
        assert_eq!(r.losses.len(), r.steps);
        assert!(r.to_json().contains("\"stage\": \"seg\""));
    }
}
