//! Parameter and FLOP accounting, patch cross-correlation diagnostics and
//! the ablation grid.

mod ablation;
mod corr;
mod cost;

pub use ablation::{run_ablation, write_ablation_csv, AblationCell, AblationGrid, AblationResult, Downsampling};
pub use corr::{capture_projections, corr, corr_avg, corr_table, CorrRow, CorrTable, ProjectionCapture};
pub use cost::{calibrate_dim, count_flops, count_params, CostKind, CostReport, CostRow, FLOP_CONVENTION};
