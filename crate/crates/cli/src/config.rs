//! JSON run configuration for `sfcm train` and `sfcm ablate`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sfcm_core::data::cifar::{self, load_cifar10_binary, load_cifar10_files};
use sfcm_core::data::synthetic::{gen_synthetic, SyntheticSpec};
use sfcm_core::data::Dataset;
use sfcm_core::models::ModelConfig;
use sfcm_core::train::{preset, OptimizerConfig, TrainConfig, PRESETS};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic {
        n: usize,
        size: usize,
        classes: usize,
        fg_frac: f32,
        clutter: f32,
        seed: u64,
        /// Size of the separately generated test set; defaults to `n / 4`.
        #[serde(default)]
        test_n: Option<usize>,
        /// Defaults to `seed + 1`.
        #[serde(default)]
        test_seed: Option<u64>,
    },
    /// Directory holding the CIFAR-10 binary batches.
    Cifar {
        dir: PathBuf,
        #[serde(default)]
        train_n: Option<usize>,
        #[serde(default)]
        test_n: Option<usize>,
    },
    /// Datasets stored as TSR1 files.
    Tsr {
        path: PathBuf,
        #[serde(default)]
        test_path: Option<PathBuf>,
        #[serde(default)]
        classes: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub model: ModelConfig,
    pub data: DataConfig,
    /// Named defaults for `train` and `optimizer`; see [`PRESETS`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub optimizer: Option<OptimizerConfig>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

/// A run with every default filled in.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: RunConfig,
    pub train: TrainConfig,
    pub optimizer: OptimizerConfig,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Applies the preset and overrides and returns a config whose JSON form
    /// reproduces the run without either.
    pub fn resolve(mut self, overrides: &Overrides) -> Result<Resolved, CliError> {
        let seed_hint = overrides.seed.or(self.train.as_ref().map(|t| t.seed)).unwrap_or(0);
        let defaults = match &self.preset {
            Some(name) => Some(preset(name, seed_hint).ok_or_else(|| {
                CliError::usage(format!("unknown preset {name:?}; expected one of {}", PRESETS.join(", ")))
            })?),
            None => None,
        };
        let (preset_train, preset_opt) = defaults.unzip();
        let mut train = self
            .train
            .take()
            .or(preset_train)
            .ok_or_else(|| CliError::usage("config needs a \"train\" section or a \"preset\""))?;
        let optimizer = self
            .optimizer
            .take()
            .or(preset_opt)
            .ok_or_else(|| CliError::usage("config needs an \"optimizer\" section or a \"preset\""))?;
        if let Some(s) = overrides.seed {
            train.seed = s;
        }
        if let Some(e) = overrides.epochs {
            train.epochs = e;
        }
        if let Some(b) = overrides.batch_size {
            train.batch_size = b;
        }
        train.validate().map_err(CliError::from_core_usage)?;
        optimizer.validate().map_err(CliError::from_core_usage)?;
        self.model.validate().map_err(CliError::from_core_usage)?;
        let out_dir = overrides
            .out_dir
            .clone()
            .or(self.out_dir.take())
            .unwrap_or_else(|| PathBuf::from("runs").join(&self.name));

        self.preset = None;
        self.train = Some(train.clone());
        self.optimizer = Some(optimizer.clone());
        self.out_dir = Some(out_dir.clone());
        self.data = self.data.resolved();
        Ok(Resolved {
            config: self,
            train,
            optimizer,
            out_dir,
        })
    }
}

impl DataConfig {
    fn resolved(self) -> Self {
        match self {
            DataConfig::Synthetic {
                n,
                size,
                classes,
                fg_frac,
                clutter,
                seed,
                test_n,
                test_seed,
            } => DataConfig::Synthetic {
                n,
                size,
                classes,
                fg_frac,
                clutter,
                seed,
                test_n: Some(test_n.unwrap_or(n / 4)),
                test_seed: Some(test_seed.unwrap_or(seed.wrapping_add(1))),
            },
            other => other,
        }
    }

    /// Training set and optional test set.
    pub fn load(&self) -> Result<(Dataset, Option<Dataset>), CliError> {
        let data = |r: sfcm_core::Result<Dataset>| r.map_err(CliError::from_core_usage);
        match self {
            DataConfig::Synthetic {
                n,
                size,
                classes,
                fg_frac,
                clutter,
                seed,
                test_n,
                test_seed,
            } => {
                let spec = SyntheticSpec {
                    n: *n,
                    size: *size,
                    classes: *classes,
                    fg_frac: *fg_frac,
                    clutter: *clutter,
                    seed: *seed,
                };
                let train = data(gen_synthetic(&spec))?;
                let test_n = test_n.unwrap_or(n / 4);
                let test = if test_n > 0 {
                    Some(data(gen_synthetic(&SyntheticSpec {
                        n: test_n,
                        seed: test_seed.unwrap_or(seed.wrapping_add(1)),
                        ..spec
                    }))?)
                } else {
                    None
                };
                Ok((train, test))
            }
            DataConfig::Cifar { dir, train_n, test_n } => {
                let paths: Vec<PathBuf> = cifar::TRAIN_FILES.iter().map(|f| dir.join(f)).collect();
                let train = data(load_cifar10_files(&paths, *train_n))?;
                let test_file = dir.join(cifar::TEST_FILE);
                let test = if test_n != &Some(0) && test_file.exists() {
                    Some(data(load_cifar10_binary(test_file, *test_n))?)
                } else {
                    None
                };
                Ok((train, test))
            }
            DataConfig::Tsr {
                path,
                test_path,
                classes,
            } => {
                let train = data(Dataset::load_tsr(path, *classes))?;
                let test = match test_path {
                    Some(p) => Some(data(Dataset::load_tsr(p, Some(classes.unwrap_or(train.classes()))))?),
                    None => None,
                };
                Ok((train, test))
            }
        }
    }
}

/// Checks that the model can consume the dataset.
pub fn check_compatible(model: &ModelConfig, data: &Dataset) -> Result<(), CliError> {
    let [c, h, w] = data.image_dims();
    if c != model.input_channels || h != model.input_size || w != model.input_size {
        return Err(CliError::usage(format!(
            "model expects {}x{}x{} images, data has {c}x{h}x{w}",
            model.input_channels, model.input_size, model.input_size
        )));
    }
    if data.classes() != model.classes {
        return Err(CliError::usage(format!(
            "model has {} classes, data has {}",
            model.classes,
            data.classes()
        )));
    }
    Ok(())
}
