//! Flat binary image files and CSV manifests.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  b"CLABF64\0"
//! rank    u32      number of per-item dimensions
//! dims    rank × u32
//! count   u64      number of items
//! data    count × prod(dims) × f64 (IEEE-754, little-endian), item-major
//! ```
//!
//! The manifest is CSV with header `index,label,split`, one row per item in
//! file order.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Dataset, Split};
use crate::error::{LabError, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"CLABF64\0";

/// Writes `images` (`count × prod(item_dims)`) to `path`.
pub fn write_images(path: &Path, images: &Tensor, item_dims: &[usize]) -> Result<()> {
    let per: usize = item_dims.iter().product();
    if per != images.cols() {
        return Err(LabError::Contract(format!("item dims {item_dims:?} do not match row width {}", images.cols())));
    }
    let mut buf = Vec::with_capacity(24 + 4 * item_dims.len() + 8 * images.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(item_dims.len() as u32).to_le_bytes());
    for &d in item_dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(images.rows() as u64).to_le_bytes());
    for v in images.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| LabError::io(path, e))
}

/// Reads a file written by [`write_images`]; returns item dims and a
/// `count × prod(dims)` tensor.
pub fn read_images(path: &Path) -> Result<(Vec<usize>, Tensor)> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            LabError::Missing(format!("image file {}", path.display()))
        } else {
            LabError::io(path, e)
        }
    })?;
    let bad = |what: &str| LabError::Config(format!("{}: {what}", path.display()));
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated image file"))?;
        pos += n;
        Ok(s)
    };
    if take(8)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let rank = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize);
    }
    let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let per: usize = dims.iter().product();
    let mut data = Vec::with_capacity(count * per);
    for _ in 0..count * per {
        data.push(f64::from_le_bytes(take(8)?.try_into().expect("8 bytes")));
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after image data"));
    }
    Ok((dims, Tensor::from_vec(vec![count, per], data)?))
}

/// Writes `<dir>/<id>.bin` and `<dir>/<id>.csv`; returns both paths.
pub fn export_dataset(dir: &Path, ds: &Dataset) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let bin = dir.join(format!("{}.bin", ds.id));
    let csv = dir.join(format!("{}.csv", ds.id));
    write_images(&bin, &ds.images, &[ds.side, ds.side])?;
    write_manifest(&csv, &ds.labels, &ds.splits)?;
    Ok((bin, csv))
}

pub fn write_manifest(path: &Path, labels: &[usize], splits: &[Split]) -> Result<()> {
    if labels.len() != splits.len() {
        return Err(LabError::Contract(format!("{} labels, {} splits", labels.len(), splits.len())));
    }
    let mut text = String::from("index,label,split\n");
    for (i, (l, s)) in labels.iter().zip(splits).enumerate() {
        text.push_str(&format!("{i},{l},{s}\n"));
    }
    fs::write(path, text).map_err(|e| LabError::io(path, e))
}

/// Parses a manifest into `(label, split)` rows.
pub fn read_manifest(path: &Path) -> Result<Vec<(usize, Split)>> {
    let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("index,label,split") {
        return Err(LabError::Config(format!("{}: missing manifest header", path.display())));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || LabError::Config(format!("{}: bad manifest row {}: `{line}`", path.display(), i + 1));
            let mut f = line.split(',');
            let index: usize = f.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let label: usize = f.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let split = match f.next() {
                Some("train") => Split::Train,
                Some("val") => Split::Val,
                Some("test") => Split::Test,
                _ => return Err(bad()),
            };
            if index != i || f.next().is_some() {
                return Err(bad());
            }
            Ok((label, split))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_domain, DomainSpec};

    #[test]
    fn export_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_domain(&DomainSpec::far_texture(2)).unwrap();
        let (bin, csv) = export_dataset(dir.path(), &ds).unwrap();
        let (dims, images) = read_images(&bin).unwrap();
        assert_eq!(dims, vec![16, 16]);
        assert_eq!(images, ds.images);
        let rows = read_manifest(&csv).unwrap();
        assert_eq!(rows.len(), ds.len());
        assert!(rows.iter().zip(ds.labels.iter().zip(&ds.splits)).all(|((l, s), (l2, s2))| l == l2 && s == s2));
        let raw = fs::read(&bin).unwrap();
        assert_eq!(&raw[..8], MAGIC);
        assert_eq!(raw.len(), 8 + 4 + 8 + 8 + 8 * ds.images.len());
    }

    #[test]
    fn truncated_and_missing_files_fail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_images(&p, &Tensor::filled(&[2, 4], 0.5), &[2, 2]).unwrap();
        let mut raw = fs::read(&p).unwrap();
        raw.pop();
        fs::write(&p, raw).unwrap();
        assert!(matches!(read_images(&p), Err(LabError::Config(_))));
        assert!(matches!(read_images(&dir.path().join("none.bin")), Err(LabError::Missing(_))));
    }
}
