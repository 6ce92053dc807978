//! Run configuration file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SynthKind;
use crate::error::{Error, Result};
use crate::forecaster::{ForecasterConfig, TrainConfig, TransferPlan};
use crate::rcl::PretrainConfig;

fn default_window() -> usize {
    32
}

fn default_steps() -> usize {
    8000
}

fn default_features() -> usize {
    4
}

fn default_noise() -> f64 {
    0.1
}

/// Shape of a generated corpus used when the data argument is `synth:<kind>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_features")]
    pub features: usize,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    /// Generator seed, independent of the model seeds.
    #[serde(default)]
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            features: default_features(),
            noise_std: default_noise(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub pretrain: PretrainConfig,
    /// Length of the windows cut from the train split for pretraining.
    #[serde(default = "default_window")]
    pub pretrain_window: usize,
    #[serde(default)]
    pub forecaster: ForecasterConfig,
    #[serde(default)]
    pub transfer: TransferPlan,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub synth: SynthSpec,
    /// Dataset path or `synth:<kind>`; a command-line data argument wins.
    #[serde(default)]
    pub data: Option<String>,
    /// When set, overrides `pretrain.seed` and `train.seed`.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.pretrain_window == 0 {
            cfg.pretrain_window = default_window();
        }
        if let Some(seed) = cfg.seed {
            cfg.pretrain.seed = seed;
            cfg.train.seed = seed;
        }
        cfg.pretrain.validate()?;
        cfg.train.validate()?;
        cfg.transfer.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Where a run's series comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Csv(std::path::PathBuf),
    Synth(SynthKind),
}

impl std::str::FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.strip_prefix("synth:") {
            Some(kind) => Ok(DataSource::Synth(kind.parse()?)),
            None => Ok(DataSource::Csv(s.into())),
        }
    }
}

impl std::fmt::Display for DataSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DataSource::Csv(p) => write!(f, "{}", p.display()),
            DataSource::Synth(k) => write!(f, "synth:{k}"),
        }
    }
}

impl DataSource {
    pub fn load(&self, synth: &SynthSpec) -> Result<crate::data::DatasetSplit> {
        match self {
            DataSource::Csv(path) => crate::data::load_csv(path),
            DataSource::Synth(kind) => {
                let series = crate::data::synth_corpus(*kind, 1, synth.steps, synth.features, synth.noise_std, synth.seed)?;
                crate::data::DatasetSplit::from_rows(&series[0], crate::data::default_columns(synth.features))
            }
        }
    }

    /// Short name for metric tables.
    pub fn label(&self) -> String {
        match self {
            DataSource::Csv(p) => p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string()),
            DataSource::Synth(k) => format!("synth:{k}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg.pretrain.n_t, 3);
        assert_eq!(cfg.pretrain.tau, 0.1);
        assert_eq!(cfg.pretrain.ladder.sigmas(), &[0.0, 1e-3, 1e-2]);
        assert_eq!(cfg.forecaster.n_layer, 4);
        assert_eq!(cfg.forecaster.t_in, 96);
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.pretrain_window, 32);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_json(r#"{"pretrain": {"n_tt": 3}}"#).unwrap_err().to_string();
        assert!(err.contains("n_tt"), "{err}");
        let err = RunConfig::from_json(r#"{"forecaster": {"mamba": {"d_modle": 3}}}"#).unwrap_err().to_string();
        assert!(err.contains("d_modle"), "{err}");
        let err = RunConfig::from_json(r#"{"bogus": 1}"#).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn top_level_seed_overrides() {
        let cfg = RunConfig::from_json(r#"{"seed": 11, "train": {"seed": 3}}"#).unwrap();
        assert_eq!((cfg.pretrain.seed, cfg.train.seed), (11, 11));
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_json(r#"{"pretrain": {"n_t": 1, "ladder": [0.0]}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"pretrain": {"ladder": [0.0, -1.0, 0.1]}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"transfer": {"replace_fraction": 2.0}}"#).is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = RunConfig::from_json(r#"{"transfer": {"replace_fraction": 0.5, "freeze_mode": "frozen-a"}}"#).unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn data_sources_parse() {
        assert_eq!("synth:multi-sine".parse::<DataSource>().unwrap(), DataSource::Synth(SynthKind::MultiSine));
        assert!("synth:nope".parse::<DataSource>().is_err());
        assert_eq!("a/ETTh1.csv".parse::<DataSource>().unwrap().label(), "ETTh1");
    }
}
