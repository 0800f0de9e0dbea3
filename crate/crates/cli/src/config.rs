//! Run configuration: one JSON file per experiment, overridable by flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hbmc::metrics::DEFAULT_BINS;
use hbmc::oracle::QuadratureConfig;
use hbmc::simulators::Family;
use hbmc::summary::SummaryConfig;
use hbmc::trainer::TrainingConfig;
use serde::{Deserialize, Serialize};

pub const RUN_SCHEMA: u32 = 1;

/// Group and observation counts of one validation cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cell {
    pub groups: usize,
    pub observations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationConfig {
    /// Held-out datasets per repetition.
    pub datasets: usize,
    pub repetitions: usize,
    pub groups: usize,
    pub observations: usize,
    pub bins: usize,
    /// Held-out datasets per model used for the validation loss during training.
    pub holdout_per_model: usize,
    /// Optional `(M, N)` grid; one report per cell when set.
    pub grid: Vec<Cell>,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            datasets: 5000,
            repetitions: 5,
            groups: 25,
            observations: 25,
            bins: DEFAULT_BINS,
            holdout_per_model: 100,
            grid: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub experiment: String,
    pub models: Vec<Family>,
    /// Network architecture; `input_dim` and `num_models` follow `models`.
    pub summary: SummaryConfig,
    /// Training settings; `seed` follows the run seed.
    pub training: TrainingConfig,
    pub validation: ValidationConfig,
    pub quadrature: QuadratureConfig,
    pub out: PathBuf,
    pub seed: u64,
    /// Fit the network's input standardization on the training store, or on
    /// the held-out set in the online regime, when training from scratch.
    pub standardize_inputs: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: RUN_SCHEMA,
            experiment: "default".into(),
            models: vec![Family::NormalM1, Family::NormalM2],
            summary: SummaryConfig::default(),
            training: TrainingConfig::default(),
            validation: ValidationConfig::default(),
            quadrature: QuadratureConfig::default(),
            out: PathBuf::from("runs"),
            seed: 0,
            standardize_inputs: true,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Applies flag overrides and derived fields, then checks invariants.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self> {
        if self.schema_version != RUN_SCHEMA {
            bail!(hbmc::Error::Config(format!(
                "config schema version {} is not supported (expected {RUN_SCHEMA})",
                self.schema_version
            )));
        }
        if let Some(s) = seed {
            self.seed = s;
        }
        self.training.seed = self.seed;
        if self.models.len() < 2 {
            bail!(hbmc::Error::Config("need at least two candidate models".into()));
        }
        self.summary.num_models = self.models.len();
        self.summary.input_dim = self.models[0].dim();
        self.summary.validate()?;
        self.training.validate()?;
        self.quadrature.validate()?;
        let v = &self.validation;
        if v.bins == 0 || v.repetitions == 0 || v.groups == 0 || v.observations == 0 {
            bail!(hbmc::Error::Config(
                "validation bins, repetitions and sizes must be positive".into()
            ));
        }
        if v.grid.iter().any(|c| c.groups == 0 || c.observations == 0) {
            bail!(hbmc::Error::Config("grid cells need positive sizes".into()));
        }
        Ok(self)
    }

    pub fn model_names(&self) -> Vec<String> {
        self.models.iter().map(|f| f.name().to_owned()).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
