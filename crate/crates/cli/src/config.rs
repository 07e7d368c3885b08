//! Experiment configuration and its canonical TOML echo.

use std::fs;
use std::path::{Path, PathBuf};

use jacreg::data::mnist_paths;
use jacreg::{subsample, AttackConfig, Dataset, Rng, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable overriding the default MNIST directory.
pub const DATA_DIR_ENV: &str = "JACREG_DATA_DIR";
pub const DEFAULT_DATA_DIR: &str = "data/mnist";
pub const CONFIG_FILE: &str = "config.toml";

/// Stream of the subset seed used to pick training samples.
const STREAM_SUBSET: u64 = 2;

/// Everything needed to rerun a training experiment bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data_dir: PathBuf,
    /// Training samples drawn from the 60000-sample train split.
    pub n_train: usize,
    pub subset_seed: u64,
    /// Worker threads; 0 leaves the choice to the runtime.
    pub threads: usize,
    pub train: TrainConfig,
    /// PGD attack run at logged epochs, if any.
    pub log_attack: Option<AttackConfig>,
    /// PGD attack for the final evaluation.
    pub eval_attack: AttackConfig,
}

impl ExperimentConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable")
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Writes the echo into `dir`, creating it if needed.
    pub fn write_echo(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, self.to_toml()).map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
    }
}

/// `--data-dir`, else the environment override, else `data/mnist`.
pub fn resolve_data_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
}

pub fn load_mnist_split(dir: &Path, train: bool) -> Result<Dataset<f64>, CliError> {
    let (images, labels) = mnist_paths(dir, train);
    for p in [&images, &labels] {
        if !p.exists() {
            return Err(CliError::Usage(format!(
                "MNIST file not found: {} (set --data-dir or {DATA_DIR_ENV})",
                p.display()
            )));
        }
    }
    Ok(jacreg::load_idx(&images, &labels)?)
}

/// The seeded training subset and the full test set.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Dataset<f64>,
    pub test: Dataset<f64>,
}

pub fn load_split(dir: &Path, n_train: usize, subset_seed: u64) -> Result<Split, CliError> {
    let full = load_mnist_split(dir, true)?;
    let test = load_mnist_split(dir, false)?;
    if n_train > full.len() {
        return Err(CliError::Usage(format!(
            "--n-train {n_train} exceeds the {} training samples in {}",
            full.len(),
            dir.display()
        )));
    }
    let train = subsample(&full, n_train, &mut Rng::with_stream(subset_seed, STREAM_SUBSET))?;
    Ok(Split { train, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use jacreg::{Geometry, PenaltyNorm, RegConfig};

    #[test]
    fn echo_round_trips() {
        let reg = RegConfig::from_effective(PenaltyNorm::FrobSq, 0.5, 0.01).unwrap();
        let cfg = ExperimentConfig {
            data_dir: "some/dir".into(),
            n_train: 1000,
            subset_seed: 7,
            threads: 1,
            train: TrainConfig::reference_default(reg, 7),
            log_attack: None,
            eval_attack: AttackConfig::default_for(Geometry::L2),
        };
        let text = cfg.to_toml();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap().to_toml(), text);
    }
}
