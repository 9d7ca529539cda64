use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::schedule::Phase;
use crate::error::{Error, Result};
use crate::io::{ensure_parent, write_atomic};

/// One line of the metrics log, written after every optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub phase: String,
    pub epoch: u64,
    /// CLM cross-entropy or PPO surrogate loss. `None` on a skipped
    /// feedback step.
    pub loss: Option<f64>,
    pub value_loss: Option<f64>,
    pub mean_reward: Option<f64>,
    pub mean_parent_ppl: Option<f64>,
    pub eval_l1_ppl: Option<f64>,
    pub eval_l2_ppl: Option<f64>,
    pub wall_ms: Option<f64>,
    pub grad_norm: Option<f64>,
    pub rollouts: Option<usize>,
    pub discarded: Option<usize>,
}

impl MetricsRecord {
    pub fn new(step: u64, epoch: u64, phase: Phase) -> Self {
        Self {
            step,
            phase: phase.to_string(),
            epoch,
            loss: None,
            value_loss: None,
            mean_reward: None,
            mean_parent_ppl: None,
            eval_l1_ppl: None,
            eval_l2_ppl: None,
            wall_ms: None,
            grad_norm: None,
            rollouts: None,
            discarded: None,
        }
    }

    pub fn is_ppo(&self) -> bool {
        self.phase == "ppo"
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics record serializes")
    }
}

/// Append-only JSON-lines metrics file.
pub struct MetricsLog {
    path: PathBuf,
}

impl MetricsLog {
    /// Opens `path` for appending, first dropping any records at or after
    /// `resume_step` (left over from a run that is being resumed).
    pub fn open(path: &Path, resume_step: u64) -> Result<Self> {
        ensure_parent(path)?;
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut kept = String::new();
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                if parse_line(path, i, line)?.step < resume_step {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
            write_atomic(path, kept.as_bytes())?;
        } else {
            write_atomic(path, b"")?;
        }
        Ok(Self { path: path.to_path_buf() })
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        writeln!(f, "{}", record.to_json_line()).map_err(|e| Error::io(&self.path, e))
    }
}

fn parse_line(path: &Path, index: usize, line: &str) -> Result<MetricsRecord> {
    serde_json::from_str(line).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        line: index + 1,
        reason: e.to_string(),
    })
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(path, i, l))
        .collect()
}
