use std::path::Path;

use mrp_core::model::MrpNetConfig;
use mrp_core::synthdata::{Dataset, DomainSpec, OcclusionMix, Renderer};
use mrp_core::trainer::{DomainData, HyperParams, Level};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// The configuration shipped with the crate.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Domains {
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub background: DomainSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub source: usize,
    pub target: usize,
    pub background: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub heatmap_sigma: f64,
    pub train: SplitSizes,
    pub eval: SplitSizes,
    /// Occluder and truncation fractions of the joint-level source set.
    pub source_occlusion: OcclusionMix,
    /// Same for the joint-level target set.
    pub target_occlusion: OcclusionMix,
    pub train_seed: u64,
    pub eval_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: MrpNetConfig,
    pub domains: Domains,
    pub data: DataConfig,
    pub hyper: HyperParams,
    /// Adaptation level used by the `fusion` and `baseline` modes.
    pub level: Level,
    /// Network initialisation and batch sampling seed.
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn shipped() -> Self {
        Self::from_json(DEFAULT_CONFIG).expect("shipped config is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::from_io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.hyper.validate()?;
        let tree = &self.model.skeleton;
        self.domains.source.validate(tree)?;
        self.domains.target.validate(tree)?;
        self.domains.background.validate(tree)?;
        self.data.source_occlusion.validate()?;
        self.data.target_occlusion.validate()?;
        if !(self.data.heatmap_sigma.is_finite() && self.data.heatmap_sigma > 0.0) {
            return Err(CliError::Config(
                "data.heatmap_sigma must be positive".into(),
            ));
        }
        for (name, s) in [("train", self.data.train), ("eval", self.data.eval)] {
            if s.source == 0 || s.target == 0 || s.background == 0 {
                return Err(CliError::Config(format!(
                    "data.{name} sizes must be positive"
                )));
            }
        }
        if self.data.train_seed == self.data.eval_seed {
            return Err(CliError::Config(
                "train and eval data seeds must differ".into(),
            ));
        }
        Ok(())
    }

    /// Replaces the run seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.hyper.seed = seed;
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    fn renderer(&self, spec: &DomainSpec) -> Result<Renderer, CliError> {
        Ok(Renderer::new(
            spec.clone(),
            self.model.skeleton.clone(),
            self.model.image_size,
            self.model.grid,
            self.data.heatmap_sigma,
        )?)
    }

    /// Source, target and background sets of one split. Person sets are
    /// clean at pose level and occluded at joint level.
    pub fn build_split(&self, level: Level, eval: bool) -> Result<DomainData, CliError> {
        let (sizes, seed) = if eval {
            (self.data.eval, self.data.eval_seed)
        } else {
            (self.data.train, self.data.train_seed)
        };
        let (source_mix, target_mix) = match level {
            Level::Pose => (OcclusionMix::default(), OcclusionMix::default()),
            Level::Joint => (self.data.source_occlusion, self.data.target_occlusion),
        };
        let bg = OcclusionMix {
            background: true,
            ..OcclusionMix::default()
        };
        // Distinct seeds per domain keep the domains' random streams apart.
        Ok(DomainData {
            source: self.renderer(&self.domains.source)?.build_dataset(
                sizes.source,
                source_mix,
                seed.wrapping_mul(3),
            )?,
            target: self.renderer(&self.domains.target)?.build_dataset(
                sizes.target,
                target_mix,
                seed.wrapping_mul(3) + 1,
            )?,
            background: self.renderer(&self.domains.background)?.build_dataset(
                sizes.background,
                bg,
                seed.wrapping_mul(3) + 2,
            )?,
        })
    }
}

/// Loads `dir/{source,target,background}`.
pub fn load_split(dir: &Path, cfg: &MrpNetConfig) -> Result<DomainData, CliError> {
    let load = |name: &str| -> Result<Dataset, CliError> {
        let d = dir.join(name);
        if !d.exists() {
            return Err(CliError::MissingFile(d.display().to_string()));
        }
        Ok(Dataset::load(&d, &cfg.skeleton)?)
    };
    Ok(DomainData {
        source: load("source")?,
        target: load("target")?,
        background: load("background")?,
    })
}

pub fn save_split(dir: &Path, data: &DomainData) -> Result<(), CliError> {
    data.source.save(&dir.join("source"))?;
    data.target.save(&dir.join("target"))?;
    data.background.save(&dir.join("background"))?;
    Ok(())
}
