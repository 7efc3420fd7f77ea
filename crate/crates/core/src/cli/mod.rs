//! Config-driven orchestration behind the `lab` binary: pretrain, eval,
//! analyze, ablate and report, with a JSONL metric store and text/CSV/SVG
//! report generation.

mod commands;
mod config;
mod records;
mod report;
mod svg;

pub use commands::{checkpoint_dir, cmd_ablate, cmd_analyze, cmd_eval, cmd_pretrain, cmd_report, final_checkpoint, freeze_config};
pub use config::{
    AblationAxis, AblationSettings, AnalysisKind, AnalysisSettings, CheckpointSelector, DomainRef, ExperimentConfig, LrSchedule,
    MethodSpec, PretrainSettings,
};
pub use records::{MetricRecord, RecordKey, RecordStore};
pub use report::{curve_shape, summary_table, write_report, ReportFiles, Stat, TRANSFER_PROTOCOLS};
pub use svg::{line_chart, Series};

use crate::error::{LabError, Result};
use crate::evaluation::Protocol;

/// Worker cap from `LAB_THREADS`; `None` when unset.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var("LAB_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(LabError::Config(format!("LAB_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

/// Protocol names accepted on the command line; `probe` means `linear`.
pub fn parse_protocol(s: &str) -> Result<Protocol> {
    if s == "probe" {
        Ok(Protocol::Linear)
    } else {
        s.parse()
    }
}
