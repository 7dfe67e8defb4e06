use std::path::{Path, PathBuf};

use atlas_match::identify::{LossKind, TrainConfig};
use atlas_match::metric::MiningMode;
use atlas_match::register::PyramidConfig;
use atlas_match::synthatlas::AugmentationRanges;
use atlas_match::ClaheConfig;
use serde::{Deserialize, Serialize};

use crate::Failure;

pub const SEED_ENV: &str = "ATLAS_MATCH_SEED";
pub const SCHEMA: &str = include_str!("../run_config.schema.json");

/// Everything a run needs. Missing sections take their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub registration: RegistrationConfig,
}

/// Relative paths are resolved against the config file's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    /// Overrides the atlas directory named in the manifest.
    pub atlas_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: usize,
    pub embed_dim: usize,
    pub loss: LossKind,
    pub mining: MiningMode,
    pub margin: Option<f64>,
    pub batch_size: usize,
    pub clahe: Option<ClaheConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            input_size: t.input_size,
            embed_dim: t.embed_dim,
            loss: t.loss,
            mining: t.mining,
            margin: t.margin,
            batch_size: t.batch_size,
            clahe: t.clahe,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub max_iterations: usize,
    pub patience: usize,
    pub validate_every: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub augmentation: AugmentationRanges,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            max_iterations: t.max_iterations,
            patience: t.patience,
            validate_every: t.validate_every,
            learning_rate: t.learning_rate,
            seed: t.seed,
            augmentation: t.augmentation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub pyramid: PyramidConfig,
    pub trials: usize,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            pyramid: PyramidConfig::default(),
            trials: 100,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.paths.manifest,
            &mut cfg.paths.atlas_dir,
            &mut cfg.paths.checkpoint,
            &mut cfg.paths.out_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, Failure> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Applies `ATLAS_MATCH_SEED` if set.
    pub fn apply_seed_env(&mut self) -> Result<(), Failure> {
        if let Some(seed) = env_seed()? {
            self.training.seed = seed;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let m = &self.model;
        if ![64, 128].contains(&m.input_size) {
            return Err(Failure::Usage(format!("model.input_size {} not in {{64, 128}}", m.input_size)));
        }
        if ![16, 32].contains(&m.batch_size) {
            return Err(Failure::Usage(format!("model.batch_size {} not in {{16, 32}}", m.batch_size)));
        }
        self.train_config().validate().map_err(|e| Failure::Usage(e.to_string()))?;
        self.registration.pyramid.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        if let Some(c) = &m.clahe {
            c.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let (m, t) = (&self.model, &self.training);
        TrainConfig {
            loss: m.loss,
            mining: m.mining,
            batch_size: m.batch_size,
            margin: m.margin,
            max_iterations: t.max_iterations,
            patience: t.patience,
            validate_every: t.validate_every,
            learning_rate: t.learning_rate,
            seed: t.seed,
            input_size: m.input_size,
            embed_dim: m.embed_dim,
            augmentation: t.augmentation,
            clahe: m.clahe,
        }
    }
}

pub fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Checks that a required input path exists.
pub fn existing(path: &Path, what: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} does not exist", path.display())))
    }
}
