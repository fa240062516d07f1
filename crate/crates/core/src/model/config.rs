use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::preprocess::{ChanDsConfig, PatchGeometry};
use crate::ssm::{Discretization, ScanEngine};

/// Form of the P1/P2/P3 projections inside a block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    /// One affine map each.
    Linear1,
    /// Three stacked affine maps for P1 and P2, one for P3.
    Linear3,
    /// Kernel-3 convolutions over the patch axis for P1 and P2, kernel 1 for P3.
    #[default]
    Conv1dK3,
}

impl ProjectionKind {
    pub const ALL: [ProjectionKind; 3] = [
        ProjectionKind::Linear1,
        ProjectionKind::Linear3,
        ProjectionKind::Conv1dK3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProjectionKind::Linear1 => "linear1",
            ProjectionKind::Linear3 => "linear3",
            ProjectionKind::Conv1dK3 => "conv1d_k3",
        }
    }
}

fn one() -> usize {
    1
}

/// Complete architecture description; it alone fixes every weight shape.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `(C, H, W)` of the input spectrogram.
    pub input_shape: [usize; 3],
    pub chan_ds: ChanDsConfig,
    pub geometry: PatchGeometry,
    pub dim: usize,
    pub dim_s: usize,
    pub dt_rank: usize,
    #[serde(default)]
    pub projection: ProjectionKind,
    #[serde(default = "one")]
    pub depth: usize,
    pub n_classes: usize,
    #[serde(default)]
    pub discretization: Discretization,
    #[serde(default)]
    pub scan: ScanEngine,
    /// Offset added to every run seed when initializing weights, so two
    /// configs can draw different weights under the same run seed.
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    /// Every violated invariant, or `Ok` when the config is usable.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.input_shape.contains(&0) {
            errs.push(format!("input_shape must be positive, got {:?}", self.input_shape));
        }
        errs.extend(self.chan_ds.problems(self.input_shape));
        if errs.is_empty() {
            let [c, h, w] = self.fused_shape_unchecked();
            if let Err(e) = self.geometry.layout(c, h, w) {
                errs.push(format!("geometry: {e}"));
            }
        }
        if self.dim < 2 || self.dim % 2 != 0 {
            errs.push(format!("dim must be even and ≥ 2, got {}", self.dim));
        }
        if self.dim_s == 0 {
            errs.push("dim_s must be ≥ 1".into());
        }
        if self.depth == 0 {
            errs.push("depth must be ≥ 1".into());
        }
        if self.n_classes < 2 {
            errs.push(format!("n_classes must be ≥ 2, got {}", self.n_classes));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }

    fn fused_shape_unchecked(&self) -> [usize; 3] {
        let [_, h, w] = self.input_shape;
        let (rh, rw) = self.chan_ds.factors;
        [self.chan_ds.channels, h / rh.max(1), w / rw.max(1)]
    }

    /// `[C_cd, H_cd, W_cd]` after Chan-DS.
    pub fn fused_shape(&self) -> Result<[usize; 3]> {
        self.chan_ds.output_shape(self.input_shape)
    }

    /// `(N, P)`: number of patches and flattened patch length.
    pub fn layout(&self) -> Result<(usize, usize)> {
        let [c, h, w] = self.fused_shape()?;
        self.geometry.layout(c, h, w)
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn hash(&self) -> String {
        hash_json(self)
    }
}

/// Hex SHA-256 of a value's compact JSON encoding.
pub fn hash_json<S: Serialize>(v: &S) -> String {
    let bytes = serde_json::to_vec(v).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// Per-dataset reference settings. `dim` is the member of each dataset's sweep list
/// whose parameter count is closest to the published model size.
pub mod presets {
    use super::*;

    fn base(
        input_shape: [usize; 3],
        layers: usize,
        channels: usize,
        factors: (usize, usize),
        dim: usize,
        dim_s: usize,
        dt_rank: usize,
        n_classes: usize,
    ) -> ModelConfig {
        ModelConfig {
            input_shape,
            chan_ds: ChanDsConfig {
                layers,
                channels,
                kernel: (3, 3),
                factors,
                use_avgpool: true,
            },
            geometry: PatchGeometry::DopplerAligned,
            dim,
            dim_s,
            dt_rank,
            projection: ProjectionKind::Conv1dK3,
            depth: 1,
            n_classes,
            discretization: Discretization::Zoh,
            scan: ScanEngine::Sequential,
            seed: 0,
        }
    }

    pub const DIAT_SWEEP: &[usize] = &[8, 16, 32, 64, 80];
    pub const CI4R_SWEEP: &[usize] = &[8, 16, 32, 64, 80, 96, 128, 160];
    pub const UOG20_SWEEP: &[usize] = &[8, 16, 20, 24, 32];

    pub fn diat() -> ModelConfig {
        base([3, 224, 224], 2, 16, (2, 2), 8, 1, 2, 6)
    }

    pub fn ci4r() -> ModelConfig {
        base([1, 224, 224], 1, 1, (2, 8), 80, 4, 0, 11)
    }

    pub fn uog20() -> ModelConfig {
        base([1, 224, 224], 1, 1, (2, 32), 16, 16, 4, 6)
    }

    /// `(name, config, sweep, published #params, published #FLOP)`.
    pub fn table() -> Vec<(&'static str, ModelConfig, &'static [usize], f64, f64)> {
        vec![
            ("diat", diat(), DIAT_SWEEP, 21.7e3, 145.6e6),
            ("ci4r", ci4r(), CI4R_SWEEP, 71.4e3, 8.8e6),
            ("uog20", uog20(), UOG20_SWEEP, 6.7e3, 1.0e6),
        ]
    }

    pub fn by_name(name: &str) -> Option<ModelConfig> {
        table().into_iter().find(|t| t.0 == name).map(|t| t.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for (name, cfg, ..) in presets::table() {
            cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        assert_eq!(presets::uog20().layout().unwrap(), (7, 112));
        assert_eq!(presets::ci4r().layout().unwrap(), (28, 112));
        assert_eq!(presets::diat().layout().unwrap(), (112, 16 * 112));
    }

    #[test]
    fn all_problems_reported() {
        let mut cfg = presets::uog20();
        cfg.dim = 7;
        cfg.depth = 0;
        cfg.n_classes = 1;
        cfg.chan_ds.layers = 3;
        let Err(Error::InvalidConfig(errs)) = cfg.validate() else {
            panic!("expected InvalidConfig")
        };
        assert_eq!(errs.len(), 4, "{errs:?}");
    }

    #[test]
    fn json_roundtrip_and_hash() {
        let cfg = presets::ci4r();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ModelConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.dim = 64;
        assert_ne!(other.hash(), cfg.hash());
    }
}
