//! Flat TOML run configuration.
//!
//! ```toml
//! data_dir = "data/synth"
//! out_dir = "runs/first"
//! seed = 7
//! epochs = 20
//! input_size = 64
//! base_filters = 8
//! interaction_filters = [16, 24, 32]
//! ```
//!
//! Every key is optional; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::metrics::MonitorMetric;
use crate::network::ModelConfig;
use crate::relabel::RelabelSchedule;
use crate::train::TrainSettings;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Part masks for every split; defaults to each split's `parts/`.
    pub parts_dir: Option<PathBuf>,
    pub seed: u64,

    pub lr0: f64,
    pub decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub augment: bool,
    pub monitor_metric: MonitorMetric,

    pub input_size: usize,
    pub base_filters: usize,
    pub interaction_filters: [usize; 3],
    pub expansion_factor: usize,
    pub decoder_filters: [usize; 3],
    pub reduction: usize,

    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_smooth: f64,
    pub dice_weight: f64,
    pub focal_weight: f64,

    pub warmup_rounds: usize,
    pub t0: f64,
    pub t_step: f64,
    pub epochs_per_round: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let l = LossConfig::default();
        let r = RelabelSchedule::default();
        Self {
            data_dir: None,
            out_dir: PathBuf::from("runs/skinseg"),
            parts_dir: None,
            seed: 0,
            lr0: 0.001,
            decay: 0.96,
            epochs: 30,
            batch_size: 8,
            augment: true,
            monitor_metric: r.monitor_metric,
            input_size: m.input_size,
            base_filters: m.base_filters,
            interaction_filters: m.interaction_filters,
            expansion_factor: m.expansion_factor,
            decoder_filters: m.decoder_filters,
            reduction: m.reduction,
            focal_gamma: l.focal_gamma,
            focal_alpha: l.focal_alpha,
            dice_smooth: l.dice_smooth,
            dice_weight: l.dice_weight,
            focal_weight: l.focal_weight,
            warmup_rounds: r.warmup_rounds,
            t0: r.t0,
            t_step: r.t_step,
            epochs_per_round: r.epochs_per_round,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_size: self.input_size,
            base_filters: self.base_filters,
            interaction_filters: self.interaction_filters,
            expansion_factor: self.expansion_factor,
            decoder_filters: self.decoder_filters,
            reduction: self.reduction,
            seed: self.seed,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            focal_gamma: self.focal_gamma,
            focal_alpha: self.focal_alpha,
            dice_smooth: self.dice_smooth,
            dice_weight: self.dice_weight,
            focal_weight: self.focal_weight,
        }
    }

    pub fn schedule(&self) -> RelabelSchedule {
        RelabelSchedule {
            warmup_rounds: self.warmup_rounds,
            t0: self.t0,
            t_step: self.t_step,
            epochs_per_round: self.epochs_per_round,
            monitor_metric: self.monitor_metric,
        }
    }

    pub fn settings(&self, workers: usize) -> TrainSettings {
        TrainSettings {
            lr0: self.lr0,
            decay: self.decay,
            batch_size: self.batch_size,
            seed: self.seed,
            augment: self.augment,
            loss: self.loss_config(),
            monitor: self.monitor_metric,
            workers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return bad(format!("decay must lie in (0, 1), got {}", self.decay));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        self.model_config().validate()?;
        self.loss_config().validate()?;
        self.schedule().validate()
    }

    pub fn require_data_dir(&self) -> Result<&Path> {
        self.data_dir
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("no data directory; set `data_dir` or pass --data".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = TrainConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(cfg.model_config(), ModelConfig::default());
        assert_eq!((cfg.lr0, cfg.decay, cfg.epochs, cfg.batch_size), (0.001, 0.96, 30, 8));
        assert_eq!(cfg.schedule(), RelabelSchedule::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = TrainConfig {
            data_dir: Some("d".into()),
            seed: 3,
            monitor_metric: MonitorMetric::Dsc,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        for text in [
            "learning_rate = 0.1",
            "decay = 1.0",
            "input_size = 60",
            "t0 = 0.0",
            "epochs = 0",
            "monitor_metric = \"auc\"",
            "seed = \"x\"",
        ] {
            assert!(
                matches!(TrainConfig::from_toml_str(text), Err(Error::InvalidConfig(_))),
                "{text}"
            );
        }
    }
}
