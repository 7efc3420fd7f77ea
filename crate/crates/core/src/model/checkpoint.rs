//! JSON checkpoints.
//!
//! ```text
//! {
//!   "schema_version": 1,
//!   "epoch": <completed epochs>,
//!   "config": <ModelConfig>,
//!   "params": { "query": { "<name>": {"shape": [..], "data": <nested rows>} },
//!               "key":   { ... } | null },
//!   "queues": { "selfsup": <queue> | null, "supcon": <queue> | null },
//!   "rng": { "key": u64, "counter": u64 },
//!   "optimizer": { "config": {..}, "velocities": { "<name>": [..] } } | null
//! }
//! ```
//!
//! A queue is `{capacity, dim, labeled, write, filled, embeddings: [[..]], labels: [..]}`.
//! Matrices are lists of rows; vectors are flat lists. Floats are written
//! with shortest round-trip formatting, so a save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{KeyQueue, ModelConfig, ModelState, Network};
use crate::numerics::{Rng, Sgd, Tensor};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("checkpoint {}: truncated file ({detail})", path.display())]
    Truncated { path: PathBuf, detail: String },
    #[error("checkpoint {}: malformed ({detail})", path.display())]
    Malformed { path: PathBuf, detail: String },
    #[error("checkpoint {}: schema version {found}, expected {expected}", path.display())]
    VersionMismatch { path: PathBuf, found: u64, expected: u32 },
    #[error("checkpoint {}: `{name}` has shape {found:?}, expected {expected:?}", path.display())]
    ShapeMismatch { path: PathBuf, name: String, expected: Vec<usize>, found: Vec<usize> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum Nested {
    Flat(Vec<f64>),
    Rows(Vec<Vec<f64>>),
}

impl Nested {
    fn from_tensor(t: &Tensor) -> Self {
        if t.shape().len() == 1 {
            Nested::Flat(t.data().to_vec())
        } else {
            Nested::Rows(t.data().chunks(t.cols()).map(<[f64]>::to_vec).collect())
        }
    }

    fn from_matrix(data: &[f64], cols: usize) -> Self {
        Nested::Rows(data.chunks(cols).map(<[f64]>::to_vec).collect())
    }

    /// Flattened values plus the shape implied by the nesting.
    fn flatten(self) -> (Vec<f64>, Vec<usize>) {
        match self {
            Nested::Flat(v) => {
                let n = v.len();
                (v, vec![n])
            }
            Nested::Rows(rows) => {
                let r = rows.len();
                let c = rows.first().map_or(0, Vec::len);
                let ragged = rows.iter().any(|row| row.len() != c);
                let flat = rows.concat();
                (flat, if ragged { vec![r, usize::MAX] } else { vec![r, c] })
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamArray {
    shape: Vec<usize>,
    data: Nested,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QueueDump {
    capacity: usize,
    dim: usize,
    labeled: bool,
    write: usize,
    filled: usize,
    embeddings: Nested,
    labels: Vec<i64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamsDump {
    query: BTreeMap<String, ParamArray>,
    key: Option<BTreeMap<String, ParamArray>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QueuesDump {
    selfsup: Option<QueueDump>,
    supcon: Option<QueueDump>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    schema_version: u32,
    epoch: usize,
    config: ModelConfig,
    params: ParamsDump,
    queues: QueuesDump,
    rng: Rng,
    optimizer: Option<Sgd>,
}

/// Model state plus the optimizer saved alongside it, if any.
#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub state: ModelState,
    pub optimizer: Option<Sgd>,
}

fn dump_network(net: &Network) -> BTreeMap<String, ParamArray> {
    net.named_params().into_iter().map(|(n, t)| (n, ParamArray { shape: t.shape().to_vec(), data: Nested::from_tensor(t) })).collect()
}

fn dump_queue(q: &KeyQueue) -> QueueDump {
    QueueDump {
        capacity: q.capacity(),
        dim: q.dim(),
        labeled: q.is_labeled(),
        write: q.write_pointer(),
        filled: q.filled(),
        embeddings: Nested::from_matrix(q.raw_embeddings(), q.dim()),
        labels: (0..q.capacity()).map(|s| q.label(s)).collect(),
    }
}

pub fn save_checkpoint(path: &Path, state: &ModelState, optimizer: Option<&Sgd>) -> Result<(), CheckpointError> {
    let file = CheckpointFile {
        schema_version: SCHEMA_VERSION,
        epoch: state.epoch,
        config: state.config.clone(),
        params: ParamsDump { query: dump_network(&state.query), key: state.key.as_ref().map(dump_network) },
        queues: QueuesDump { selfsup: state.selfsup_queue.as_ref().map(dump_queue), supcon: state.supcon_queue.as_ref().map(dump_queue) },
        rng: state.rng.clone(),
        optimizer: optimizer.cloned(),
    };
    let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let text = serde_json::to_string(&file).expect("checkpoint serializes");
    fs::write(path, text).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint, CheckpointError> {
    let p = || path.to_path_buf();
    let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io { path: p(), source })?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| {
        if e.is_eof() {
            CheckpointError::Truncated { path: p(), detail: e.to_string() }
        } else {
            CheckpointError::Malformed { path: p(), detail: e.to_string() }
        }
    })?;
    let found = value.get("schema_version").and_then(serde_json::Value::as_u64).unwrap_or(0);
    if found != SCHEMA_VERSION as u64 {
        return Err(CheckpointError::VersionMismatch { path: p(), found, expected: SCHEMA_VERSION });
    }
    let file: CheckpointFile =
        serde_json::from_value(value).map_err(|e| CheckpointError::Malformed { path: p(), detail: e.to_string() })?;

    let mut state =
        ModelState::init(file.config.clone(), 0).map_err(|e| CheckpointError::Malformed { path: p(), detail: e.to_string() })?;
    restore_network(path, &mut state.query, &file.params.query)?;
    match (&mut state.key, &file.params.key) {
        (Some(k), Some(dump)) => restore_network(path, k, dump)?,
        (None, None) => {}
        _ => return Err(CheckpointError::Malformed { path: p(), detail: "key encoder presence does not match objective".into() }),
    }
    state.selfsup_queue = restore_queue(path, "selfsup", state.selfsup_queue.as_ref(), file.queues.selfsup)?;
    state.supcon_queue = restore_queue(path, "supcon", state.supcon_queue.as_ref(), file.queues.supcon)?;
    state.rng = file.rng;
    state.epoch = file.epoch;
    Ok(LoadedCheckpoint { state, optimizer: file.optimizer })
}

fn restore_network(path: &Path, net: &mut Network, dump: &BTreeMap<String, ParamArray>) -> Result<(), CheckpointError> {
    let expected_names: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
    if let Some(extra) = dump.keys().find(|k| !expected_names.contains(k)) {
        return Err(CheckpointError::Malformed { path: path.to_path_buf(), detail: format!("unexpected parameter `{extra}`") });
    }
    for (name, param) in net.named_params_mut() {
        let entry = dump
            .get(&name)
            .ok_or_else(|| CheckpointError::Malformed { path: path.to_path_buf(), detail: format!("missing parameter `{name}`") })?;
        let mismatch = |found: Vec<usize>| CheckpointError::ShapeMismatch {
            path: path.to_path_buf(),
            name: name.clone(),
            expected: param.shape().to_vec(),
            found,
        };
        if entry.shape != param.shape() {
            return Err(mismatch(entry.shape.clone()));
        }
        let (data, nested_shape) = entry.data.clone().flatten();
        if nested_shape != entry.shape {
            return Err(mismatch(nested_shape));
        }
        *param = Tensor::from_vec(entry.shape.clone(), data).map_err(|_| mismatch(entry.shape.clone()))?;
    }
    Ok(())
}

fn restore_queue(
    path: &Path,
    which: &str,
    template: Option<&KeyQueue>,
    dump: Option<QueueDump>,
) -> Result<Option<KeyQueue>, CheckpointError> {
    let malformed = |detail: String| CheckpointError::Malformed { path: path.to_path_buf(), detail };
    match (template, dump) {
        (None, None) => Ok(None),
        (Some(t), Some(d)) => {
            let expected = vec![t.capacity(), t.dim()];
            let (data, nested_shape) = d.embeddings.flatten();
            if vec![d.capacity, d.dim] != expected || nested_shape != expected {
                return Err(CheckpointError::ShapeMismatch {
                    path: path.to_path_buf(),
                    name: format!("queues.{which}"),
                    expected,
                    found: nested_shape,
                });
            }
            if d.labeled != t.is_labeled() {
                return Err(malformed(format!("queue `{which}` labeled flag does not match objective")));
            }
            KeyQueue::from_parts(d.capacity, d.dim, d.labeled, data, d.labels, d.write, d.filled)
                .map(Some)
                .ok_or_else(|| malformed(format!("queue `{which}` is inconsistent")))
        }
        _ => Err(malformed(format!("queue `{which}` presence does not match objective"))),
    }
}
