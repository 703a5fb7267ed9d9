//! Run configuration: a TOML file with one table per pipeline stage.
//!
//! ```toml
//! seed = 7
//! out = "runs/a"
//!
//! [dataset]
//! n = 2000
//! grid_size = 8
//! quantiles = 5
//! model = { noise_std = 0.05, nonlinear = false }
//!
//! [train]
//! pretrain_budget = { steps = 400 }
//! pretrain_lr = 0.05
//!
//! [concepts]
//! n = 200
//!
//! [tcav]
//! layers = [0, 1, 2]
//! methods = ["plain-gradient", "integrated-gradients"]
//! ig_steps = 50
//! alignment = "column"
//! ```
//!
//! Every key is optional. Command-line flags override the file.

use std::path::{Path, PathBuf};

use anyhow::Context;
use landprobe::cav::CavConfig;
use landprobe::data::{GroundTruthModel, SplitFractions, TaskDatasetConfig, DEFAULT_CONCEPT_SET_SIZE};
use landprobe::tcav::{AlignmentNormalization, IgConfig, SensitivityMethod};
use landprobe::{ExplainConfig, Split, TrainConfig};
use serde::{Deserialize, Serialize};

pub const OUT_ENV: &str = "LANDPROBE_OUT";
const FALLBACK_OUT: &str = "runs/default";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub n: usize,
    pub grid_size: usize,
    /// Label quantiles used to stratify the split.
    pub quantiles: usize,
    pub fractions: SplitFractions,
    pub model: GroundTruthModel,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let d = TaskDatasetConfig::default();
        Self {
            n: d.n,
            grid_size: d.grid_size,
            quantiles: 5,
            fractions: SplitFractions::default(),
            model: d.model,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConceptSection {
    /// Scenes per concept.
    pub n: usize,
}

impl Default for ConceptSection {
    fn default() -> Self {
        Self {
            n: DEFAULT_CONCEPT_SET_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TcavSection {
    pub layers: Option<Vec<usize>>,
    pub methods: Vec<SensitivityMethod>,
    pub ig_steps: usize,
    pub bins: usize,
    pub split: Split,
    pub alignment: AlignmentNormalization,
    pub cav: CavConfig,
}

impl Default for TcavSection {
    fn default() -> Self {
        let e = ExplainConfig::default();
        Self {
            layers: e.layers,
            methods: e.methods,
            ig_steps: e.ig.steps,
            bins: e.bins,
            split: e.split,
            alignment: e.alignment,
            cav: e.cav,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub dataset: DatasetSection,
    pub train: TrainConfig,
    pub concepts: ConceptSection,
    pub tcav: TcavSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    /// Output root: flag, then config file, then the environment, then a fixed default.
    pub fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(FALLBACK_OUT))
    }

    pub fn task_dataset(&self) -> TaskDatasetConfig {
        TaskDatasetConfig {
            n: self.dataset.n,
            grid_size: self.dataset.grid_size,
            model: self.dataset.model.clone(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn explain_config(&self) -> ExplainConfig {
        ExplainConfig {
            layers: self.tcav.layers.clone(),
            methods: self.tcav.methods.clone(),
            cav: self.tcav.cav,
            ig: IgConfig {
                steps: self.tcav.ig_steps,
            },
            bins: self.tcav.bins,
            split: self.tcav.split,
            alignment: self.tcav.alignment,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> landprobe::Result<()> {
        self.train_config().validate()?;
        self.dataset.model.validate()?;
        self.tcav.cav.validate()?;
        IgConfig {
            steps: self.tcav.ig_steps,
        }
        .validate()?;
        if self.dataset.grid_size < 4 || self.dataset.quantiles < 1 {
            return Err(landprobe::Error::InvalidArgument {
                arg: "dataset",
                reason: "grid_size must be at least 4 and quantiles positive".into(),
            });
        }
        if self.tcav.bins < 2 {
            return Err(landprobe::Error::InvalidArgument {
                arg: "tcav.bins",
                reason: "need at least 2 bins".into(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: RunConfig = toml::from_str(
            r#"
            seed = 3
            [dataset]
            n = 500
            [train]
            pretrain_budget = { epochs = 2 }
            [tcav]
            methods = ["plain-gradient"]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.dataset.n, 500);
        assert_eq!(cfg.dataset.grid_size, 8);
        assert_eq!(cfg.train.pretrain_budget, landprobe::train::Budget::Epochs(2));
        assert_eq!(cfg.train_config().seed, 3);
        assert_eq!(cfg.explain_config().methods, vec![SensitivityMethod::PlainGradient]);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[dataset]\nsize = 3\n").is_err());
        assert!(toml::from_str::<RunConfig>("colour = 1\n").is_err());
    }
}
