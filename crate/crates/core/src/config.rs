//! Declarative experiment configuration.
//!
//! A single JSON tree with strict schema validation: unknown keys are
//! rejected everywhere, so a typo fails loudly instead of silently falling
//! back to a default. The fully resolved config is persisted next to a
//! run's outputs and fingerprinted into checkpoints.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::GeneratorSpec;
use crate::error::{GdError, Result};
use crate::evalkit::FusionMode;
use crate::hashing::fnv1a64_hex;
use crate::model::ArchConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    MeanPath,
    SinglePaths,
    Ensemble,
    Spread,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    pub batch_size: usize,
    /// Queries per identity when splitting the held-out domain.
    pub queries_per_id: usize,
    pub baselines: Vec<Baseline>,
    /// Grid for the fixed-checkpoint path-spread harness.
    pub lambda_grid: Vec<f64>,
    pub spread_paths: usize,
    /// Grid for the train-per-lambda sweep.
    pub sweep_grid: Vec<f64>,
    pub fusion: FusionMode,
    /// Evaluation-side seeds (path-spread noise); one result row per
    /// baseline per seed.
    pub seeds: Vec<u64>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            batch_size: 64,
            queries_per_id: 2,
            baselines: vec![
                Baseline::MeanPath,
                Baseline::SinglePaths,
                Baseline::Ensemble,
                Baseline::Spread,
            ],
            lambda_grid: vec![0.0, 0.15, 0.3, 0.6, 1.0],
            spread_paths: 100,
            sweep_grid: vec![0.1, 0.5, 0.6, 0.7, 1.0],
            fusion: FusionMode::DistanceWeighted,
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    pub generator: GeneratorSpec,
    /// Directory of dataset files written by `gen`; when absent, data is
    /// generated in memory from `generator`.
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub arch: ArchConfig,
    pub data: DataSpec,
    pub train: TrainConfig,
    pub eval: EvalSpec,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GdError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| GdError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.eval.batch_size == 0 {
            return Err(GdError::Config("eval.batch_size must be >= 1".into()));
        }
        if self.eval.queries_per_id == 0 {
            return Err(GdError::Config("eval.queries_per_id must be >= 1".into()));
        }
        if self.arch.input_dim != self.data.generator.dim {
            return Err(GdError::Config(format!(
                "arch.input_dim {} does not match generator dim {}",
                self.arch.input_dim, self.data.generator.dim
            )));
        }
        Ok(())
    }

    /// Canonical JSON used for fingerprinting and persistence.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// FNV-1a 64 fingerprint of the resolved config, hex.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(fnv1a64_hex(self.canonical_json()?.as_bytes()))
    }
}
