use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::kernels::Tensor;
use crate::model::ModelParams;

pub const METRICS_FILE: &str = "metrics.tsv";
const METRICS_HEADER: &str = "update\tvalidation_loss\tfile";

/// One saved checkpoint and its validation loss.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub update: usize,
    pub validation_loss: f64,
    pub file: PathBuf,
}

pub fn write_metrics(dir: &Path, records: &[CheckpointRecord]) -> Result<()> {
    let mut text = format!("{METRICS_HEADER}\n");
    for r in records {
        let name = r.file.file_name().map(|f| f.to_string_lossy()).unwrap_or_default();
        text.push_str(&format!("{}\t{}\t{}\n", r.update, r.validation_loss, name));
    }
    let path = dir.join(METRICS_FILE);
    std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Checkpoint records of a training directory; file paths are absolute.
pub fn read_metrics(dir: &Path) -> Result<Vec<CheckpointRecord>> {
    let path = dir.join(METRICS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = text.lines().enumerate();
    if lines.next().map(|l| l.1) != Some(METRICS_HEADER) {
        return Err(Error::Line {
            line: 1,
            message: format!("{} lacks its header", path.display()),
        });
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let bad = || Error::Line {
                line: i + 1,
                message: format!("malformed metrics line {l:?}"),
            };
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(CheckpointRecord {
                update: f[0].parse().map_err(|_| bad())?,
                validation_loss: f[1].parse().map_err(|_| bad())?,
                file: dir.join(f[2]),
            })
        })
        .collect()
}

/// The `best_n` records by ascending validation loss; ties go to the
/// earlier update.
pub fn select_best(records: &[CheckpointRecord], best_n: usize) -> Vec<&CheckpointRecord> {
    let mut sorted: Vec<&CheckpointRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        a.validation_loss
            .total_cmp(&b.validation_loss)
            .then(a.update.cmp(&b.update))
    });
    sorted.truncate(best_n);
    sorted
}

/// Elementwise mean of the given parameter sets.
pub fn average_params(sets: &[ModelParams]) -> Result<ModelParams> {
    let first = sets
        .first()
        .ok_or_else(|| Error::Checkpoint("nothing to average".into()))?;
    for (i, s) in sets.iter().enumerate().skip(1) {
        for (name, t) in first.iter() {
            let other = s
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("checkpoint {i} lacks parameter {name}")))?;
            if other.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?} in checkpoint {i}, {:?} in checkpoint 0",
                    other.shape(),
                    t.shape()
                )));
            }
        }
        if let Some(extra) = s.names().find(|n| !first.contains(n)) {
            return Err(Error::Checkpoint(format!(
                "checkpoint {i} has parameter {extra} missing from checkpoint 0"
            )));
        }
    }
    let n = sets.len() as f64;
    let mut out = ModelParams::new();
    for (name, t) in first.iter() {
        let mut acc = vec![0.0f64; t.numel()];
        for s in sets {
            for (a, &v) in acc.iter_mut().zip(s.get(name)?.data()) {
                *a += v as f64;
            }
        }
        let data = acc.into_iter().map(|a| (a / n) as f32).collect();
        out.insert(name, Tensor::new(t.shape().to_vec(), data)?)?;
    }
    Ok(out)
}

/// Mean of the `best_n` checkpoints by validation loss.
pub fn average_checkpoints(records: &[CheckpointRecord], best_n: usize) -> Result<ModelParams> {
    if best_n == 0 {
        return Err(Error::Config("best_n must be at least 1".into()));
    }
    if records.len() < best_n {
        return Err(Error::Checkpoint(format!(
            "{} checkpoints available, {best_n} requested",
            records.len()
        )));
    }
    let sets = select_best(records, best_n)
        .into_iter()
        .map(|r| ModelParams::load(&r.file))
        .collect::<Result<Vec<_>>>()?;
    average_params(&sets)
}
