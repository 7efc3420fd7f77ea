//! Aggregated tables and curves from the record store.
//!
//! Every output is a pure function of the records (timestamps ignored), and
//! rows are emitted in a fixed order, so regenerating a report is
//! byte-identical.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::fs;
use std::path::{Path, PathBuf};

use super::records::{MetricRecord, RecordStore};
use super::svg::{line_chart, Series};
use crate::error::{LabError, Result};
use crate::model::ObjectiveKind;

pub const TRANSFER_PROTOCOLS: [&str; 3] = ["linear", "finetune", "fewshot"];

/// Mean and sample standard deviation (`n − 1`; 0 for a single value).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n.max(1) as f64;
        let std = if n > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        Self { mean, std, n }
    }
}

/// Orders methods as objectives first (in their canonical order), then
/// any other tag alphabetically.
fn method_rank(m: &str) -> (usize, String) {
    let pos = ObjectiveKind::ALL.iter().position(|k| k.tag() == m).unwrap_or(ObjectiveKind::ALL.len());
    (pos, m.to_string())
}

/// Numeric axis values first, in numeric order, then the rest by name.
fn axis_value_order(v: &str) -> (u8, u64, String) {
    match v.parse::<f64>() {
        Ok(x) => {
            let bits = x.to_bits();
            (0, if x.is_sign_negative() { !bits } else { bits | (1 << 63) }, String::new())
        }
        Err(_) => (1, 0, v.to_string()),
    }
}

fn csv_num(v: f64) -> String {
    format!("{v:.6}")
}

#[derive(Debug, Clone, Default)]
pub struct ReportFiles {
    pub files: Vec<PathBuf>,
}

fn write(dir: &Path, name: &str, text: &str, out: &mut ReportFiles) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, text).map_err(|e| LabError::io(&p, e))?;
    out.files.push(p);
    Ok(())
}

type Cell = BTreeMap<(String, String), Vec<f64>>;

/// Final-checkpoint transfer results: protocol → (method, domain) → values.
fn transfer_cells(records: &[MetricRecord]) -> BTreeMap<String, Cell> {
    let mut out: BTreeMap<String, Cell> = BTreeMap::new();
    for r in records {
        if r.axis.is_none() && r.epoch.is_none() && r.metric == "accuracy" && TRANSFER_PROTOCOLS.contains(&r.protocol.as_str()) {
            out.entry(r.protocol.clone()).or_default().entry((r.method.clone(), r.domain.clone())).or_default().push(r.value);
        }
    }
    out
}

fn sorted_methods<'a>(it: impl Iterator<Item = &'a String>) -> Vec<String> {
    let mut m: Vec<String> = it.cloned().collect();
    m.sort_by_key(|s| method_rank(s));
    m.dedup();
    m
}

/// Text table and CSV rows for one protocol.
pub fn summary_table(protocol: &str, cells: &Cell) -> (String, String) {
    let methods = sorted_methods(cells.keys().map(|(m, _)| m));
    let mut domains: Vec<String> = cells.keys().map(|(_, d)| d.clone()).collect();
    domains.sort();
    domains.dedup();
    let mut header = vec![format!("{protocol} accuracy")];
    header.extend(domains.iter().cloned());
    header.push("mean".into());
    let mut rows = vec![header];
    let mut csv = String::new();
    for m in &methods {
        let mut row = vec![m.clone()];
        let mut means = Vec::new();
        for d in &domains {
            match cells.get(&(m.clone(), d.clone())) {
                Some(v) => {
                    let s = Stat::of(v);
                    means.push(s.mean);
                    row.push(format!("{:.2} ± {:.2} (n={})", 100.0 * s.mean, 100.0 * s.std, s.n));
                    let _ = writeln!(csv, "{protocol},{m},{d},{},{},{}", csv_num(s.mean), csv_num(s.std), s.n);
                }
                None => row.push("-".into()),
            }
        }
        let grand = means.iter().sum::<f64>() / means.len().max(1) as f64;
        row.push(format!("{:.2}", 100.0 * grand));
        let _ = writeln!(csv, "{protocol},{m},mean,{},,", csv_num(grand));
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
    let mut text = String::new();
    for (i, r) in rows.iter().enumerate() {
        let line: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(text, "{}", line.join("  ").trim_end());
        if i == 0 {
            let _ = writeln!(text, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
        }
    }
    (text, csv)
}

/// Writes every table, curve CSV and SVG under `<out>/report/`.
pub fn write_report(out: &Path) -> Result<ReportFiles> {
    let records = RecordStore::new(out).load()?;
    if records.is_empty() {
        return Err(LabError::Missing(format!(
            "no records in {}; run pretrain/eval/analyze/ablate first",
            RecordStore::new(out).path().display()
        )));
    }
    let dir = out.join("report");
    fs::create_dir_all(&dir).map_err(|e| LabError::io(&dir, e))?;
    let mut files = ReportFiles::default();

    let cells = transfer_cells(&records);
    let mut summary_csv = String::from("protocol,method,domain,mean,std,n\n");
    for (protocol, c) in &cells {
        let (text, csv) = summary_table(protocol, c);
        write(&dir, &format!("summary_{protocol}.txt"), &text, &mut files)?;
        summary_csv.push_str(&csv);
    }
    if !cells.is_empty() {
        write(&dir, "summary.csv", &summary_csv, &mut files)?;
    }

    // analysis metrics and anything else without an axis or epoch
    let mut other: BTreeMap<(String, (usize, String), String, String), Vec<f64>> = BTreeMap::new();
    for r in &records {
        if r.axis.is_none() && r.epoch.is_none() && !(r.metric == "accuracy" && TRANSFER_PROTOCOLS.contains(&r.protocol.as_str())) {
            other.entry((r.protocol.clone(), method_rank(&r.method), r.domain.clone(), r.metric.clone())).or_default().push(r.value);
        }
    }
    if !other.is_empty() {
        let mut csv = String::from("protocol,method,domain,metric,mean,std,n\n");
        for ((p, (_, m), d, metric), v) in &other {
            let s = Stat::of(v);
            let _ = writeln!(csv, "{p},{m},{d},{metric},{},{},{}", csv_num(s.mean), csv_num(s.std), s.n);
        }
        write(&dir, "metrics.csv", &csv, &mut files)?;
    }

    // ablation curves: axis → (method, protocol, domain) → value → samples
    let mut axes: BTreeMap<String, BTreeMap<(String, String, String), BTreeMap<(u8, u64, String), (String, Vec<f64>)>>> = BTreeMap::new();
    for r in &records {
        if let (Some(axis), Some(value)) = (&r.axis, &r.axis_value) {
            if r.metric == "accuracy" {
                axes.entry(axis.clone())
                    .or_default()
                    .entry((r.method.clone(), r.protocol.clone(), r.domain.clone()))
                    .or_default()
                    .entry(axis_value_order(value))
                    .or_insert_with(|| (value.clone(), Vec::new()))
                    .1
                    .push(r.value);
            }
        }
    }
    for (axis, curves) in &axes {
        let mut csv = String::from("axis,value,method,protocol,domain,mean,std,n\n");
        let mut series = Vec::new();
        let mut notes = String::new();
        for ((method, protocol, domain), points) in curves {
            let mut pts = Vec::new();
            for (i, (value, v)) in points.values().enumerate() {
                let s = Stat::of(v);
                let _ = writeln!(csv, "{axis},{value},{method},{protocol},{domain},{},{},{}", csv_num(s.mean), csv_num(s.std), s.n);
                let x = value.parse::<f64>().unwrap_or(i as f64);
                pts.push((x, s.mean));
            }
            let _ = writeln!(notes, "{method} {protocol} {domain}: {}", curve_shape(&pts));
            series.push(Series { name: format!("{domain} ({protocol})"), points: pts });
        }
        write(&dir, &format!("ablation_{axis}.csv"), &csv, &mut files)?;
        write(&dir, &format!("ablation_{axis}.txt"), &notes, &mut files)?;
        let svg = line_chart(&format!("transfer accuracy vs {axis}"), axis, "accuracy", &series);
        write(&dir, &format!("ablation_{axis}.svg"), &svg, &mut files)?;
    }

    // per-epoch transfer curves
    let mut epochs: BTreeMap<(String, (usize, String), String), BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in &records {
        if let Some(e) = r.epoch {
            if r.axis.is_none() && r.metric == "accuracy" && TRANSFER_PROTOCOLS.contains(&r.protocol.as_str()) {
                epochs
                    .entry((r.protocol.clone(), method_rank(&r.method), r.domain.clone()))
                    .or_default()
                    .entry(e)
                    .or_default()
                    .push(r.value);
            }
        }
    }
    if !epochs.is_empty() {
        let mut csv = String::from("protocol,method,domain,epoch,mean,std,n\n");
        let mut by_protocol: BTreeMap<String, Vec<Series>> = BTreeMap::new();
        for ((p, (_, m), d), points) in &epochs {
            let mut pts = Vec::new();
            for (e, v) in points {
                let s = Stat::of(v);
                let _ = writeln!(csv, "{p},{m},{d},{e},{},{},{}", csv_num(s.mean), csv_num(s.std), s.n);
                pts.push((*e as f64, s.mean));
            }
            by_protocol.entry(p.clone()).or_default().push(Series { name: format!("{m} / {d}"), points: pts });
        }
        write(&dir, "epoch_curves.csv", &csv, &mut files)?;
        for (p, series) in &by_protocol {
            let svg = line_chart(&format!("{p} accuracy vs pretraining epoch"), "epoch", "accuracy", series);
            write(&dir, &format!("epoch_curve_{p}.svg"), &svg, &mut files)?;
        }
    }
    Ok(files)
}

/// Describes where a curve peaks; used for the ablation notes.
pub fn curve_shape(points: &[(f64, f64)]) -> String {
    if points.is_empty() {
        return "empty".into();
    }
    let best = (1..points.len()).fold(0, |b, i| if points[i].1 > points[b].1 { i } else { b });
    let interior = best > 0 && best + 1 < points.len();
    let rising = points[..=best].windows(2).all(|w| w[1].1 >= w[0].1);
    let falling = points[best..].windows(2).all(|w| w[1].1 <= w[0].1);
    let shape = if interior && rising && falling {
        "single interior maximum"
    } else if interior {
        "interior maximum, not unimodal"
    } else if best == 0 {
        "maximum at the lowest value"
    } else {
        "maximum at the highest value"
    };
    format!("{shape} at {} ({:.4})", points[best].0, points[best].1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(method: &str, domain: &str, seed: u64, v: f64) -> MetricRecord {
        MetricRecord::new("e", method, "linear", domain, seed, "accuracy", v)
    }

    #[test]
    fn stat_matches_manual_aggregation() {
        let v = [0.61, 0.64, 0.58, 0.66, 0.60];
        let s = Stat::of(&v);
        // mean 3.09/5 = 0.618; squared deviations sum 0.00408
        assert!((s.mean - 0.618).abs() < 1e-12);
        assert!((s.std - (0.00408f64 / 4.0).sqrt()).abs() < 1e-12);
        assert_eq!(Stat::of(&[0.3]).std, 0.0);
    }

    #[test]
    fn one_record_gives_one_cell() {
        let mut c = Cell::new();
        c.insert(("ce".into(), "near".into()), vec![0.5]);
        let (text, csv) = summary_table("linear", &c);
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("50.00 ± 0.00 (n=1)"));
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn report_is_reproducible_and_ignores_timestamps() {
        let dir = tempfile::tempdir().unwrap();
        let store = RecordStore::new(dir.path());
        let mut recs: Vec<MetricRecord> = (0..5).map(|s| rec("selfsupcon", "far_texture", s, 0.5 + 0.01 * s as f64)).collect();
        recs.push(rec("ce", "far_texture", 0, 0.4));
        recs.push(rec("ce", "far_texture", 0, 0.4).with_axis("alpha", "0.5"));
        recs.push(rec("ce", "far_texture", 0, 0.45).with_axis("alpha", "2"));
        recs.push(rec("ce", "far_texture", 0, 0.3).at_epoch(10));
        store.upsert(&recs).unwrap();
        let first = write_report(dir.path()).unwrap();
        let snapshot: Vec<Vec<u8>> = first.files.iter().map(|p| fs::read(p).unwrap()).collect();
        for r in &mut recs {
            r.timestamp += 1000;
        }
        store.upsert(&recs).unwrap();
        let second = write_report(dir.path()).unwrap();
        assert_eq!(first.files, second.files);
        for (p, before) in second.files.iter().zip(snapshot) {
            assert_eq!(fs::read(p).unwrap(), before, "{}", p.display());
        }
        let text = fs::read_to_string(dir.path().join("report/summary_linear.txt")).unwrap();
        let ce = text.lines().position(|l| l.starts_with("ce ")).unwrap();
        let ssl = text.lines().position(|l| l.starts_with("selfsupcon")).unwrap();
        assert!(ce < ssl);
        assert!(text.contains("52.00 ± 1.58 (n=5)"));
    }

    #[test]
    fn empty_store_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(write_report(dir.path()), Err(LabError::Missing(_))));
    }

    #[test]
    fn curve_shapes() {
        assert!(curve_shape(&[(0.0, 0.1), (1.0, 0.3), (2.0, 0.2)]).starts_with("single interior maximum at 1"));
        assert!(curve_shape(&[(0.0, 0.3), (1.0, 0.2)]).starts_with("maximum at the lowest"));
    }
}
