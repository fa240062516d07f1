use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use radmamba::model::{presets, ModelConfig};
use radmamba::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Where the data lives and how an unsplit directory is divided.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    pub split_ratio: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            split_ratio: 0.8,
            split_seed: 0,
        }
    }
}

/// The JSON config file: model, training and data sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CliConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    /// Dims the calibration command scans when none are given.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dim_sweep: Vec<usize>,
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// A shipped preset with its published training settings.
    pub fn preset(name: &str) -> Result<Self> {
        let Some(model) = presets::by_name(name) else {
            bail!("unknown preset {name:?}; expected diat, ci4r or uog20");
        };
        let (lr0, batch_size, epochs) = match name {
            "diat" => (1e-4, 16, 50),
            "ci4r" => (5e-3, 16, 100),
            _ => (5e-5, 256, 50),
        };
        let sweep = presets::table()
            .into_iter()
            .find(|t| t.0 == name)
            .map(|t| t.2.to_vec())
            .unwrap_or_default();
        Ok(CliConfig {
            model,
            train: TrainConfig {
                lr0,
                batch_size,
                epochs,
                ..TrainConfig::default()
            },
            data: DataConfig::default(),
            dim_sweep: sweep,
        })
    }

    /// `--config` wins over `--preset`; one of them is required.
    pub fn resolve(config: Option<&Path>, preset: Option<&str>) -> Result<Self> {
        match (config, preset) {
            (Some(p), _) => Self::load(p),
            (None, Some(name)) => Self::preset(name),
            (None, None) => bail!("either --config or --preset is required"),
        }
    }

    /// Every violated invariant across the model and training sections.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for r in [self.model.validate(), self.train.validate()] {
            match r {
                Err(radmamba::Error::InvalidConfig(p)) => problems.extend(p),
                Err(e) => problems.push(e.to_string()),
                Ok(()) => {}
            }
        }
        if !(0.0..=1.0).contains(&self.data.split_ratio) {
            problems.push(format!("data.split_ratio must be in [0, 1], got {}", self.data.split_ratio));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(radmamba::Error::InvalidConfig(problems).into())
        }
    }

    pub fn hash(&self) -> String {
        radmamba::model::hash_json(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_presets_match_library_presets() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("presets");
        for name in ["diat", "ci4r", "uog20"] {
            let file = CliConfig::load(&dir.join(format!("{name}.json"))).unwrap();
            assert_eq!(file, CliConfig::preset(name).unwrap(), "{name}");
            file.validate().unwrap();
        }
    }

    #[test]
    fn all_problems_listed() {
        let mut c = CliConfig::preset("uog20").unwrap();
        c.model.dim = 3;
        c.train.lr0 = -1.0;
        c.data.split_ratio = 2.0;
        let msg = format!("{:#}", c.validate().unwrap_err());
        assert!(msg.contains("dim") && msg.contains("lr0") && msg.contains("split_ratio"), "{msg}");
    }
}
