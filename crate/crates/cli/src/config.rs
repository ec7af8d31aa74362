//! Run configuration, read from TOML. Every key has a default; unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use voxmim::architecture::ModelConfig;
use voxmim::corruption::{MaskMode, MaskPolicy};
use voxmim::synthdata::PhantomConfig;
use voxmim::trainer::TrainConfig;
use voxmim::volume::PreprocessConfig;

use crate::error::{CliError, CliResult};

/// Label fractions a classifier may be trained on.
pub const ALLOWED_FRACTIONS: [f64; 4] = [0.10, 0.25, 0.50, 1.00];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every phase derives its own seed from it.
    pub seed: u64,
    pub paths: PathsConfig,
    pub synth: SynthConfig,
    pub preprocess: PreprocessConfig,
    pub mask: MaskConfig,
    pub model: ModelConfig,
    /// `seed` here is ignored; the phase seed comes from the master seed.
    pub pretrain: TrainConfig,
    /// `seed` here is ignored; the phase seed comes from the master seed.
    pub downstream: TrainConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: PathsConfig::default(),
            synth: SynthConfig::default(),
            preprocess: PreprocessConfig::default(),
            mask: MaskConfig::default(),
            model: ModelConfig::default(),
            pretrain: TrainConfig::default(),
            downstream: TrainConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Root directory for every artifact of a run.
    pub run_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            run_dir: PathBuf::from("run"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_unlabeled: usize,
    pub n_labeled: usize,
    pub phantom: PhantomConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_unlabeled: 64,
            n_labeled: 40,
            phantom: PhantomConfig::default(),
        }
    }
}

/// Corruption mode plus optional overrides of its preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub mode: MaskMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cube_min: Option<[usize; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cube_max: Option<[usize; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subsample_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subsample_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub occlusion_ratio: Option<f64>,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            mode: MaskMode::Dynamic,
            cube_min: None,
            cube_max: None,
            subsample_min: None,
            subsample_max: None,
            occlusion_ratio: None,
        }
    }
}

impl MaskConfig {
    pub fn policy(&self) -> MaskPolicy {
        let mut p = MaskPolicy::preset(self.mode);
        if let Some(v) = self.cube_min {
            p.cube_min = v;
        }
        if let Some(v) = self.cube_max {
            p.cube_max = v;
        }
        if let Some(v) = self.subsample_min {
            p.subsample_min = v;
        }
        if let Some(v) = self.subsample_max {
            p.subsample_max = v;
        }
        if let Some(v) = self.occlusion_ratio {
            p.occlusion_ratio = v;
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Share of labeled cases in the training split.
    pub train_fraction: f64,
    pub fractions: Vec<f64>,
    /// Replicate seeds of the reproduce grid.
    pub seeds: Vec<u64>,
    pub bootstrap_n: usize,
    pub threshold: f64,
    pub predict_batch_size: usize,
    /// Which split the label fractions subsample in the reproduce grid.
    pub fraction_of: FractionOf,
}

/// `train`: classifiers see a fraction of the training split and are scored
/// on the whole test split. `test`: classifiers see the whole training split
/// and are scored on a fraction of the test split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FractionOf {
    #[default]
    Train,
    Test,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            fractions: ALLOWED_FRACTIONS.to_vec(),
            seeds: vec![0, 1, 2],
            bootstrap_n: 100,
            threshold: 0.5,
            predict_batch_size: 8,
            fraction_of: FractionOf::Train,
        }
    }
}

pub fn check_fraction(f: f64) -> CliResult<()> {
    if ALLOWED_FRACTIONS.iter().any(|&a| (a - f).abs() < 1e-9) {
        Ok(())
    } else {
        Err(CliError::Usage(format!("fraction {f} is not one of 0.10, 0.25, 0.50, 1.00")))
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let config = match path {
            None => Self::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text).map_err(|e| match e {
                    CliError::Usage(m) => CliError::Usage(format!("{}: {m}", p.display())),
                    other => other,
                })?
            }
        };
        Ok(config)
    }

    pub fn from_toml(text: &str) -> CliResult<Self> {
        let config: Self = toml::from_str(text).map_err(|e| CliError::Usage(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> CliResult<()> {
        let usage = |e: voxmim::Error| CliError::Usage(e.to_string());
        self.synth.phantom.validate().map_err(usage)?;
        self.mask.policy().validate().map_err(usage)?;
        self.model.validate().map_err(usage)?;
        self.pretrain.validate().map_err(usage)?;
        self.downstream.validate().map_err(usage)?;
        if self.synth.phantom.dims != self.model.input_dims {
            return Err(CliError::Usage(format!(
                "phantom dims {:?} differ from model input dims {:?}",
                self.synth.phantom.dims, self.model.input_dims
            )));
        }
        let e = &self.evaluation;
        if !(e.train_fraction > 0.0 && e.train_fraction < 1.0) {
            return Err(CliError::Usage("evaluation.train_fraction must lie in (0, 1)".into()));
        }
        if e.fractions.is_empty() || e.seeds.is_empty() {
            return Err(CliError::Usage("evaluation.fractions and evaluation.seeds may not be empty".into()));
        }
        e.fractions.iter().try_for_each(|&f| check_fraction(f))?;
        if e.bootstrap_n < 2 {
            return Err(CliError::Usage("evaluation.bootstrap_n must be at least 2".into()));
        }
        if e.predict_batch_size == 0 {
            return Err(CliError::Usage("evaluation.predict_batch_size must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the configuration as sorted-key JSON.
    pub fn hash(&self) -> String {
        let text = voxmim::json::to_sorted_string(self).expect("config serialises");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}
