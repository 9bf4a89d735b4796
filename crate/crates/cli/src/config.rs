use std::fs;
use std::path::{Path, PathBuf};

use forecite::corpus::FilterPolicy;
use forecite::model::{LoraConfig, ModelConfig};
use forecite::targets::DEFAULT_DELTA;
use forecite::training::{PhaseConfig, TwoPhaseRecipe};
use forecite::YearMonth;
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub ratio: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { ratio: 0.8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub models: Vec<ModelConfig>,
    pub fractions: Vec<f64>,
    #[serde(default)]
    pub subsample_seed: u64,
}

/// One JSON file drives every subcommand that touches a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "PhaseConfig::phase1")]
    pub phase1: PhaseConfig,
    #[serde(default = "PhaseConfig::phase2")]
    pub phase2: PhaseConfig,
    #[serde(default)]
    pub lora: LoraConfig,
    #[serde(default)]
    pub lora_seed: u64,
    #[serde(default = "yes")]
    pub fine_tune: bool,
    /// Optional language-model pass over the training text before phase 1.
    #[serde(default)]
    pub pretrain: Option<PhaseConfig>,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default = "default_delta")]
    pub delta: f64,
    pub cutoff: YearMonth,
    /// Documents published in or after this month are held out of training
    /// and form the `holdout` subcommand's evaluation set.
    #[serde(default)]
    pub holdout_from: Option<YearMonth>,
    #[serde(default)]
    pub filter: Option<FilterPolicy>,
    #[serde(default)]
    pub grid: Option<GridConfig>,
}

fn yes() -> bool {
    true
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}

impl RunConfig {
    /// Reads the file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Failure::validation(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.corpus = base.join(&cfg.corpus);
        cfg.output_dir = base.join(&cfg.output_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        if !self.corpus.is_file() {
            return Err(Failure::validation(format!("corpus file not found: {}", self.corpus.display())));
        }
        self.model.validate()?;
        self.phase1.validate()?;
        self.phase2.validate()?;
        self.lora.validate()?;
        if let Some(p) = &self.pretrain {
            p.validate()?;
        }
        if let Some(f) = &self.filter {
            f.validate()?;
        }
        if !(self.split.ratio > 0.0 && self.split.ratio < 1.0) {
            return Err(Failure::validation(format!("split ratio {} not in (0, 1)", self.split.ratio)));
        }
        if !(self.delta > 0.0) {
            return Err(Failure::validation("delta must be > 0"));
        }
        if let Some(h) = self.holdout_from {
            if h > self.cutoff {
                return Err(Failure::validation("holdout_from must not be after cutoff"));
            }
        }
        Ok(())
    }

    pub fn recipe(&self) -> TwoPhaseRecipe {
        TwoPhaseRecipe {
            phase1: self.phase1.clone(),
            phase2: self.phase2.clone(),
            lora: self.lora.clone(),
            lora_seed: self.lora_seed,
            fine_tune: self.fine_tune,
        }
    }
}
