//! Representation and reliability analytics: linear CKA, calibration,
//! class separation, corruption robustness, PGD and embedding export.

mod calibration;
mod cka;
mod export;
mod robustness;
mod separation;

pub use calibration::{bin_index, calibration, Calibration, ReliabilityBins, ECE_BINS};
pub use cka::{cka_stage_grid, linear_cka, ActivationMatrix, StageGrids};
pub use export::export_embeddings;
pub use robustness::{corruption_sweep, pgd_attack, pgd_steps, CorruptionCell, CorruptionReport, PgdConfig, PgdPoint, ScoringModel};
pub use separation::{class_separation, InterDenominator, Separation};
