//! Penultimate-feature export in the flat binary + CSV manifest format.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{write_images, write_manifest, Dataset};
use crate::error::{LabError, Result};
use crate::evaluation::extract_features;
use crate::model::ModelState;

/// Writes `<dir>/<name>.bin` (`N × D` features) and `<dir>/<name>.csv`
/// (`index,label,split`) for every row of `ds`.
pub fn export_embeddings(state: &ModelState, ds: &Dataset, dir: &Path, name: &str) -> Result<(PathBuf, PathBuf)> {
    let feats = extract_features(state, &ds.images)?;
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let bin = dir.join(format!("{name}.bin"));
    let csv = dir.join(format!("{name}.csv"));
    write_images(&bin, &feats, &[feats.cols()])?;
    write_manifest(&csv, &ds.labels, &ds.splits)?;
    Ok((bin, csv))
}
