use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cost::count_params;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ProjectionKind};
use crate::par::{self, ExecPolicy};
use crate::preprocess::PatchGeometry;
use crate::signal::Dataset;
use crate::tensor::Scalar;
use crate::train::{mean_std, train, TrainConfig, TrainOptions};

/// Downsampling axis of the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Downsampling {
    /// `(1, 1)`: channel fusion only.
    None,
    /// `(8, 2)`: Doppler-heavy reduction.
    DopplerHeavy,
    /// The factors of the base configuration.
    Base,
}

impl Downsampling {
    pub const ALL: [Downsampling; 3] = [Downsampling::None, Downsampling::DopplerHeavy, Downsampling::Base];

    pub fn factors(self, base: (usize, usize)) -> (usize, usize) {
        match self {
            Downsampling::None => (1, 1),
            Downsampling::DopplerHeavy => (8, 2),
            Downsampling::Base => base,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    /// 1-based row in the 27-row layout (projection, patch, downsampling).
    pub row: usize,
    pub projection: ProjectionKind,
    pub geometry: PatchGeometry,
    pub downsampling: Downsampling,
}

impl AblationCell {
    /// The full proposed design: conv projections, Doppler-aligned patches,
    /// base downsampling.
    pub fn is_radmamba(&self) -> bool {
        self.projection == ProjectionKind::Conv1dK3
            && self.geometry == PatchGeometry::DopplerAligned
            && self.downsampling == Downsampling::Base
    }

    pub fn config(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        cfg.projection = self.projection;
        cfg.geometry = self.geometry;
        cfg.chan_ds.factors = self.downsampling.factors(base.chan_ds.factors);
        cfg
    }

    fn patch_label(&self) -> String {
        match self.geometry {
            PatchGeometry::Rectangular { h, w } => format!("({h}, {w})"),
            PatchGeometry::TimeAligned => "(1, W)".into(),
            PatchGeometry::DopplerAligned => "(H, 1)".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub cells: Vec<AblationCell>,
    pub seeds: Vec<u64>,
}

impl AblationGrid {
    /// All 27 combinations, ordered projection-major as in the reference
    /// table: {1 linear, 3 linear, conv1d} × {rect, time-aligned,
    /// Doppler-aligned} × {none, Doppler-heavy, base}.
    pub fn full(rect: (usize, usize), seeds: Vec<u64>) -> Self {
        let projections = [ProjectionKind::Linear1, ProjectionKind::Linear3, ProjectionKind::Conv1dK3];
        let geometries = [
            PatchGeometry::Rectangular { h: rect.0, w: rect.1 },
            PatchGeometry::TimeAligned,
            PatchGeometry::DopplerAligned,
        ];
        let mut cells = Vec::with_capacity(27);
        for projection in projections {
            for geometry in geometries {
                for downsampling in Downsampling::ALL {
                    cells.push(AblationCell {
                        row: cells.len() + 1,
                        projection,
                        geometry,
                        downsampling,
                    });
                }
            }
        }
        AblationGrid { cells, seeds }
    }

    /// Keep only the rows listed (1-based).
    pub fn rows(mut self, rows: &[usize]) -> Self {
        self.cells.retain(|c| rows.contains(&c.row));
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: usize,
    pub projection: String,
    pub patch: String,
    pub downsampling: String,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub params: usize,
    pub runs: usize,
    pub radmamba: bool,
    pub config_hash: String,
    pub error: Option<String>,
    #[serde(skip)]
    pub accuracies: Vec<f64>,
}

/// Train every cell over every seed. A failing cell is reported with its
/// error and the remaining cells still run.
pub fn run_ablation<T: Scalar>(
    base: &ModelConfig,
    grid: &AblationGrid,
    train_set: &Dataset,
    test_set: &Dataset,
    tcfg: &TrainConfig,
    policy: ExecPolicy,
) -> Vec<AblationResult> {
    let jobs: Vec<(usize, u64)> = (0..grid.cells.len())
        .flat_map(|c| grid.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let inner = if policy.is_parallel() { ExecPolicy::Sequential } else { policy };
    let outcomes = par::map_slice(policy, &jobs, |&(c, seed)| -> Result<f64> {
        let cfg = grid.cells[c].config(base);
        let opts = TrainOptions { policy: inner, stop: None };
        Ok(train::<T>(&cfg, train_set, test_set, tcfg, seed, opts)?.report.test_accuracy)
    });
    let per_cell = grid.seeds.len();
    grid.cells
        .iter()
        .enumerate()
        .map(|(c, cell)| {
            let cfg = cell.config(base);
            let runs = &outcomes[c * per_cell..(c + 1) * per_cell];
            let error = runs.iter().find_map(|r| r.as_ref().err().map(Error::to_string));
            let accs: Vec<f64> = runs.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
            let (mean, std) = mean_std(&accs);
            AblationResult {
                row: cell.row,
                projection: cell.projection.name().to_string(),
                patch: cell.patch_label(),
                downsampling: format!("{:?}", cell.downsampling.factors(base.chan_ds.factors)),
                mean_accuracy: mean,
                std_accuracy: std,
                params: count_params(&cfg).map_or(0, |r| r.total_params),
                runs: accs.len(),
                radmamba: cell.is_radmamba(),
                config_hash: cfg.hash(),
                error: error.or_else(|| cfg.validate().err().map(|e| e.to_string())),
                accuracies: accs,
            }
        })
        .collect()
}

/// CSV with one line per cell: row, projection, patch, downsampling,
/// accuracy mean/std (%), parameters (k), runs, RadMamba flag, config hash, error.
pub fn write_ablation_csv(path: impl AsRef<Path>, results: &[AblationResult]) -> Result<()> {
    let path = path.as_ref();
    let err = |e: csv::Error| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record([
        "row",
        "projection",
        "patch",
        "downsampling",
        "accuracy_mean_pct",
        "accuracy_std_pct",
        "params_k",
        "runs",
        "radmamba",
        "config_hash",
        "error",
    ])
    .map_err(err)?;
    for r in results {
        w.write_record([
            r.row.to_string(),
            r.projection.clone(),
            r.patch.clone(),
            r.downsampling.clone(),
            format!("{:.2}", 100.0 * r.mean_accuracy),
            format!("{:.2}", 100.0 * r.std_accuracy),
            format!("{:.1}", r.params as f64 / 1e3),
            r.runs.to_string(),
            r.radmamba.to_string(),
            r.config_hash.clone(),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::presets;

    #[test]
    fn full_grid_rows_follow_table_layout() {
        let g = AblationGrid::full((7, 7), vec![0]);
        assert_eq!(g.cells.len(), 27);
        let radmamba: Vec<usize> = g.cells.iter().filter(|c| c.is_radmamba()).map(|c| c.row).collect();
        assert_eq!(radmamba, vec![27]);
        assert_eq!(g.cells[18].projection, ProjectionKind::Conv1dK3);
        assert_eq!(g.cells[18].downsampling, Downsampling::None);
        assert!(matches!(g.cells[0].geometry, PatchGeometry::Rectangular { h: 7, w: 7 }));
        assert_eq!(g.clone().rows(&[19, 27]).cells.len(), 2);
    }

    #[test]
    fn cell_config_overrides_three_axes() {
        let base = presets::ci4r();
        let g = AblationGrid::full((7, 7), vec![0]);
        let cfg = g.cells[1].config(&base);
        assert_eq!(cfg.chan_ds.factors, (8, 2));
        assert_eq!(cfg.projection, ProjectionKind::Linear1);
        cfg.validate().unwrap();
        assert_eq!(g.cells[26].config(&base), base);
    }
}
