//! Training metrics as JSON lines and the evaluation summary.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f32,
    pub grad_norm: f32,
    pub elapsed_ms: f64,
}

/// Append-only JSONL writer; steps must strictly increase.
pub struct MetricsLog {
    out: BufWriter<File>,
    last_step: Option<usize>,
}

impl MetricsLog {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(MetricsLog {
            out: BufWriter::new(file),
            last_step: None,
        })
    }

    pub fn append(&mut self, rec: &MetricsRecord) -> Result<()> {
        if let Some(last) = self.last_step {
            if rec.step <= last {
                bail!("metrics step {} does not follow step {last}", rec.step);
            }
        }
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n")?;
        self.last_step = Some(rec.step);
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Reads a metrics log back, checking the step order.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out: Vec<MetricsRecord> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricsRecord =
            serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), i + 1))?;
        if let Some(prev) = out.last() {
            if rec.step <= prev.step {
                bail!("{} line {}: step {} does not follow {}", path.display(), i + 1, rec.step, prev.step);
            }
        }
        out.push(rec);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl From<unicon_core::metrics::MeanStd> for Stat {
    fn from(m: unicon_core::metrics::MeanStd) -> Self {
        Stat { mean: m.mean, std: m.std }
    }
}

/// Result of `eval` over the fixed test seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub config_hash: String,
    pub task: String,
    pub samples: usize,
    pub sampler_steps: usize,
    /// PSNR for the resolution tasks, SSIM for edges.
    pub condition_consistency: Stat,
    pub psnr: Stat,
    pub ssim: Stat,
}

impl EvalSummary {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: usize) -> MetricsRecord {
        MetricsRecord {
            step,
            loss: 0.5,
            grad_norm: 1.25,
            elapsed_ms: 3.0,
        }
    }

    #[test]
    fn steps_must_increase() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut log = MetricsLog::create(&path).unwrap();
        log.append(&rec(1)).unwrap();
        log.append(&rec(10)).unwrap();
        assert!(log.append(&rec(10)).is_err());
        log.finish().unwrap();
        assert_eq!(read_metrics(&path).unwrap(), vec![rec(1), rec(10)]);
        std::fs::write(&path, "{\"step\":2,\"loss\":1,\"grad_norm\":1,\"elapsed_ms\":0}\n{\"step\":2,\"loss\":1,\"grad_norm\":1,\"elapsed_ms\":0}\n").unwrap();
        assert!(read_metrics(&path).is_err());
    }
}
