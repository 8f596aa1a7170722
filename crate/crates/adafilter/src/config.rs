//! Experiment configuration, read from JSON.

use std::path::{Path, PathBuf};

use adafilter_core::gate::GateConfig;
use adafilter_core::gated::BnMode;
use adafilter_core::layers::BackboneSpec;
use adafilter_core::synth::{Shift, SynthConfig};
use adafilter_core::train::{SgdConfig, StrategySpec, TransferOptions};
use serde::{Deserialize, Serialize};

use crate::dataset::{read_json, write_json};
use crate::error::{Error, Result};

/// Where the task pair lives and how to generate it when missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataRef {
    pub dir: PathBuf,
    pub synth: SynthConfig,
}

/// Optimization settings of one training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: SgdConfig,
}

impl Phase {
    /// Source-task training used to produce the pre-trained model.
    pub fn desk_pretrain() -> Self {
        Self {
            epochs: 12,
            batch_size: 32,
            optimizer: SgdConfig {
                lr: 0.05,
                gate_lr: 0.0,
                momentum: 0.9,
                decay_epochs: vec![8, 11],
                decay_factor: 10.0,
            },
        }
    }

    /// Target-task fine-tuning: 30 epochs, three 10x decays.
    pub fn desk_finetune() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            optimizer: SgdConfig::default(),
        }
    }

    fn validate(&self, field: &str) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{field}.batch_size must be positive")));
        }
        self.optimizer
            .validate()
            .map_err(|e| Error::Config(format!("{field}.optimizer: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataRef,
    pub strategy: StrategySpec,
    /// Backbone layout; the classifier width is set per task.
    #[serde(default = "default_backbone")]
    pub backbone: BackboneSpec,
    #[serde(default = "Phase::desk_pretrain")]
    pub pretrain: Phase,
    /// Seed of the source model; shared by every fine-tuning seed.
    #[serde(default)]
    pub pretrain_seed: u64,
    #[serde(default = "Phase::desk_finetune")]
    pub finetune: Phase,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    #[serde(default = "default_bn_mode")]
    pub bn_mode: BnMode,
    #[serde(default)]
    pub gate: GateConfig,
    /// Fine-tuning seed: classifier and gate init, batch order, random policies.
    #[serde(default)]
    pub seed: u64,
    pub out: PathBuf,
    #[serde(default)]
    pub dump_policies: bool,
}

/// Appearance shift of the desk experiments: 60 degree hue rotation and a
/// 1.5 pixel warp on target images.
pub fn desk_shift(overlap: f64) -> Shift {
    Shift {
        overlap,
        hue_degrees: 60.0,
        warp_pixels: 1.5,
    }
}

fn default_backbone() -> BackboneSpec {
    BackboneSpec::desk(3, 10)
}

fn default_eval_batch() -> usize {
    64
}

fn default_bn_mode() -> BnMode {
    BnMode::Gated
}

impl ExperimentConfig {
    /// Desk-scale defaults for a synthetic pair.
    pub fn desk(dir: impl Into<PathBuf>, data_seed: u64, shift: Shift, strategy: StrategySpec, out: impl Into<PathBuf>) -> Self {
        Self {
            data: DataRef {
                dir: dir.into(),
                synth: SynthConfig::desk(data_seed, shift),
            },
            strategy,
            backbone: default_backbone(),
            pretrain: Phase::desk_pretrain(),
            pretrain_seed: 0,
            finetune: Phase::desk_finetune(),
            eval_batch_size: default_eval_batch(),
            bn_mode: default_bn_mode(),
            gate: GateConfig::default(),
            seed: 0,
            out: out.into(),
            dump_policies: false,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(crate::error::io_err(path))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read_resolved(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn validate(&self) -> Result<()> {
        self.data
            .synth
            .validate()
            .map_err(|e| Error::Config(format!("data.synth: {e}")))?;
        self.strategy
            .validate()
            .map_err(|e| Error::Config(format!("strategy: {e}")))?;
        self.backbone
            .validate()
            .map_err(|e| Error::Config(format!("backbone: {e}")))?;
        if self.backbone.in_channels != 3 {
            return Err(Error::Config("backbone.in_channels must be 3 for RGB task pairs".into()));
        }
        self.pretrain.validate("pretrain")?;
        self.finetune.validate("finetune")?;
        if self.eval_batch_size == 0 {
            return Err(Error::Config("eval_batch_size must be positive".into()));
        }
        if self.gate.embed_size == 0 || self.gate.hidden_size == 0 {
            return Err(Error::Config("gate sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn source_spec(&self) -> BackboneSpec {
        self.backbone.with_classes(self.data.synth.source_classes)
    }

    pub fn target_spec(&self) -> BackboneSpec {
        self.backbone.with_classes(self.data.synth.target_classes)
    }

    pub fn transfer_options(&self) -> TransferOptions {
        TransferOptions {
            bn_mode: self.bn_mode,
            gate: self.gate.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ExperimentConfig {
        ExperimentConfig::desk("data", 0, Shift::identity(0.6), StrategySpec::Adafilter, "runs/a")
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = sample();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn missing_strategy_is_named() {
        let mut v = serde_json::to_value(sample()).unwrap();
        v.as_object_mut().unwrap().remove("strategy");
        let err = ExperimentConfig::parse(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("strategy"), "{err}");
    }

    #[test]
    fn unknown_strategy_is_rejected() {
        let mut v = serde_json::to_value(sample()).unwrap();
        v["strategy"] = serde_json::json!({"name": "distill"});
        let err = ExperimentConfig::parse(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("distill"), "{err}");
    }

    #[test]
    fn negative_l2sp_is_rejected() {
        let mut cfg = sample();
        cfg.strategy = StrategySpec::L2sp { alpha: -1.0, beta: 0.0 };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn optional_fields_take_desk_defaults() {
        let v = serde_json::json!({
            "data": serde_json::to_value(&sample().data).unwrap(),
            "strategy": {"name": "l2sp", "alpha": 0.01, "beta": 0.01},
            "out": "runs/b"
        });
        let cfg = ExperimentConfig::parse(&v.to_string()).unwrap();
        assert_eq!(cfg.finetune, Phase::desk_finetune());
        assert_eq!(cfg.bn_mode, BnMode::Gated);
    }
}
