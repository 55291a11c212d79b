//! Per-iteration training records, shared by every trainer.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Mean over environments of the summed episode reward.
    pub reward_mean: f64,
    pub reward_std: f64,
    /// Cumulative environment steps consumed, including this iteration.
    pub samples: u64,
    /// Cumulative seconds since training started.
    pub wall_clock: f64,
    pub grad_norm: f64,
    /// True if the parameter update was skipped.
    pub skipped: bool,
    /// Environments frozen after blowing up this iteration.
    pub blowups: usize,
}

impl IterationRecord {
    /// Copy with the wall-clock field zeroed, for reproducibility checks.
    pub fn without_time(&self) -> Self {
        IterationRecord { wall_clock: 0.0, ..self.clone() }
    }
}

/// Appends one JSON object per line.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        Ok(MetricsWriter { out: BufWriter::new(File::create(path)?) })
    }

    pub fn write(&mut self, rec: &IterationRecord) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }
}

pub fn read_metrics(path: &Path) -> anyhow::Result<Vec<IterationRecord>> {
    let f = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (k, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| anyhow::anyhow!("{}:{}: {e}", path.display(), k + 1))?;
        out.push(rec);
    }
    Ok(out)
}

/// First record whose mean reward reaches `threshold`.
pub fn first_hit(records: &[IterationRecord], threshold: f64) -> Option<&IterationRecord> {
    records.iter().find(|r| r.reward_mean >= threshold)
}

pub fn best_reward(records: &[IterationRecord]) -> Option<f64> {
    records.iter().map(|r| r.reward_mean).fold(None, |m, x| Some(m.map_or(x, |m: f64| m.max(x))))
}
