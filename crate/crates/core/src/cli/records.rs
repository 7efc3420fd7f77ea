//! Line-delimited JSON metric store with unique-key upsert.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// One evaluation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord {
    pub experiment: String,
    pub method: String,
    pub protocol: String,
    pub domain: String,
    pub seed: u64,
    /// `None` for the final checkpoint.
    pub epoch: Option<usize>,
    pub metric: String,
    pub value: f64,
    /// Ablation axis and grid value, when the record comes from a sweep.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis_value: Option<String>,
    /// Seconds since the Unix epoch; not part of the key and ignored by
    /// every report.
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RecordKey {
    pub experiment: String,
    pub method: String,
    pub protocol: String,
    pub domain: String,
    pub seed: u64,
    pub epoch: Option<usize>,
    pub metric: String,
    pub axis: Option<String>,
    pub axis_value: Option<String>,
}

impl MetricRecord {
    pub fn new(experiment: &str, method: &str, protocol: &str, domain: &str, seed: u64, metric: &str, value: f64) -> Self {
        Self {
            experiment: experiment.into(),
            method: method.into(),
            protocol: protocol.into(),
            domain: domain.into(),
            seed,
            epoch: None,
            metric: metric.into(),
            value,
            axis: None,
            axis_value: None,
            timestamp: now(),
        }
    }

    pub fn at_epoch(mut self, epoch: usize) -> Self {
        self.epoch = Some(epoch);
        self
    }

    pub fn with_axis(mut self, axis: &str, value: &str) -> Self {
        self.axis = Some(axis.into());
        self.axis_value = Some(value.into());
        self
    }

    pub fn key(&self) -> RecordKey {
        RecordKey {
            experiment: self.experiment.clone(),
            method: self.method.clone(),
            protocol: self.protocol.clone(),
            domain: self.domain.clone(),
            seed: self.seed,
            epoch: self.epoch,
            metric: self.metric.clone(),
            axis: self.axis.clone(),
            axis_value: self.axis_value.clone(),
        }
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// `records.jsonl` under an output directory.
#[derive(Debug, Clone)]
pub struct RecordStore {
    path: PathBuf,
}

impl RecordStore {
    pub fn new(dir: &Path) -> Self {
        Self { path: dir.join("records.jsonl") }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// All records in file order; a missing file is an empty store.
    pub fn load(&self) -> Result<Vec<MetricRecord>> {
        let text = match fs::read_to_string(&self.path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(LabError::io(&self.path, e)),
        };
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| LabError::Config(format!("{} line {}: {e}", self.path.display(), i + 1))))
            .collect()
    }

    /// Replaces records with the same key in place and appends the rest.
    /// Holds an exclusive lock on `records.lock` for the read-modify-write.
    pub fn upsert(&self, records: &[MetricRecord]) -> Result<()> {
        if records.is_empty() {
            return Ok(());
        }
        let dir = self.path.parent().unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        let lock_path = dir.join("records.lock");
        let lock = OpenOptions::new().create(true).truncate(false).write(true).open(&lock_path).map_err(|e| LabError::io(&lock_path, e))?;
        lock.lock().map_err(|e| LabError::io(&lock_path, e))?;

        let mut all = self.load()?;
        let mut index: HashMap<RecordKey, usize> = all.iter().enumerate().map(|(i, r)| (r.key(), i)).collect();
        for r in records {
            match index.get(&r.key()) {
                Some(&i) => all[i] = r.clone(),
                None => {
                    index.insert(r.key(), all.len());
                    all.push(r.clone());
                }
            }
        }
        let tmp = dir.join("records.jsonl.tmp");
        let mut f = File::create(&tmp).map_err(|e| LabError::io(&tmp, e))?;
        for r in &all {
            let line = serde_json::to_string(r).map_err(|e| LabError::Contract(format!("record serialization: {e}")))?;
            writeln!(f, "{line}").map_err(|e| LabError::io(&tmp, e))?;
        }
        f.sync_all().map_err(|e| LabError::io(&tmp, e))?;
        fs::rename(&tmp, &self.path).map_err(|e| LabError::io(&self.path, e))?;
        lock.unlock().map_err(|e| LabError::io(&lock_path, e))
    }
}
