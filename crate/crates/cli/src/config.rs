//! Run specification: one TOML file plus command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cxrtl_core::augment::{AugmentParams, TransformKind, TransformSpec};
use cxrtl_core::backbone::{BackboneKind, FirstConvInit, Strategy, StrategyConfig, NEURON_GRID};
use cxrtl_core::optim::OptimizerKind;
use cxrtl_core::train::TrainConfig;
use cxrtl_core::SeedBank;
use serde::{Deserialize, Serialize};

pub const SPEC_FILE: &str = "run_spec.toml";
pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const STATS_FILE: &str = "norm_stats.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub backbone: BackboneKind,
    pub strategy: Strategy,
    pub pretrained: bool,
    pub n_neurons: usize,
    pub first_conv_init: FirstConvInit,
    /// Explicit ImageNet weight file; otherwise looked up in `$CXRTL_WEIGHTS_DIR`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_channels: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Resnet18,
            strategy: Strategy::FrozenBackbone,
            pretrained: true,
            n_neurons: 100,
            first_conv_init: FirstConvInit::ChannelSum,
            weights: None,
            input_channels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub lr_step: usize,
    pub optimizer: OptimizerKind,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            batch_size: d.batch_size,
            epochs: d.epochs,
            base_lr: d.base_lr,
            lr_decay: d.lr_decay,
            lr_step: d.lr_step,
            optimizer: d.optimizer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    /// Transform added to the originals for training.
    pub transform: TransformKind,
    /// Transforms compared by `ablate-augmentation`.
    pub ablation: Vec<TransformKind>,
    pub params: AugmentParams,
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self {
            transform: TransformKind::Hflip,
            ablation: TransformKind::AUGMENTING.to_vec(),
            params: AugmentParams::default(),
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub data_root: PathBuf,
    pub out: PathBuf,
    /// Directory holding the manifest and normalization statistics; when
    /// unset, `<out>/prepared` is produced from `data_root`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prepared: Option<PathBuf>,
    pub seed: u64,
    /// Hidden widths explored by `sweep`.
    pub grid: Vec<usize>,
    pub model: ModelSection,
    pub train: TrainSection,
    pub augment: AugmentSection,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("chest_xray"),
            out: PathBuf::from("runs"),
            prepared: None,
            seed: 0,
            grid: NEURON_GRID.to_vec(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            augment: AugmentSection::default(),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub data_root: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub prepared: Option<PathBuf>,
    pub seed: Option<u64>,
    pub backbone: Option<BackboneKind>,
    pub strategy: Option<Strategy>,
    pub n_neurons: Option<usize>,
    pub epochs: Option<usize>,
    pub no_pretrained: bool,
    pub weights: Option<PathBuf>,
    pub grid: Option<Vec<usize>>,
}

impl RunSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text)
            .map_err(|e| anyhow::Error::new(cxrtl_core::Error::Config(format!("{}: {e}", path.display()))))
    }

    /// Config file (if any) with overrides applied.
    pub fn resolve(config: Option<&Path>, o: &Overrides) -> Result<Self> {
        let mut spec = match config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(v) = &o.data_root {
            spec.data_root = v.clone();
        }
        if let Some(v) = &o.out {
            spec.out = v.clone();
        }
        if let Some(v) = &o.prepared {
            spec.prepared = Some(v.clone());
        }
        if let Some(v) = o.seed {
            spec.seed = v;
        }
        if let Some(v) = o.backbone {
            spec.model.backbone = v;
        }
        if let Some(v) = o.strategy {
            spec.model.strategy = v;
        }
        if let Some(v) = o.n_neurons {
            spec.model.n_neurons = v;
        }
        if let Some(v) = o.epochs {
            spec.train.epochs = v;
        }
        if o.no_pretrained {
            spec.model.pretrained = false;
        }
        if let Some(v) = &o.weights {
            spec.model.weights = Some(v.clone());
        }
        if let Some(v) = &o.grid {
            spec.grid = v.clone();
        }
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))
    }

    pub fn seeds(&self) -> SeedBank {
        SeedBank::new(self.seed)
    }

    pub fn strategy_config(&self) -> StrategyConfig {
        StrategyConfig {
            backbone: self.model.backbone,
            strategy: self.model.strategy,
            pretrained: self.model.pretrained,
            n_neurons: self.model.n_neurons,
            input_channels: self.model.input_channels,
            first_conv_init: self.model.first_conv_init,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            epochs: t.epochs,
            base_lr: t.base_lr,
            lr_decay: t.lr_decay,
            lr_step: t.lr_step,
            seed: self.seeds().derive("train"),
            optimizer: t.optimizer,
        }
    }

    pub fn transform_spec(&self) -> TransformSpec {
        TransformSpec {
            kind: self.augment.transform,
            params: self.augment.params,
        }
    }

    pub fn prepared_dir(&self) -> PathBuf {
        self.prepared.clone().unwrap_or_else(|| self.out.join("prepared"))
    }

    /// Check every section before any work starts.
    pub fn validate(&self) -> cxrtl_core::Result<()> {
        self.strategy_config().validate()?;
        self.train_config().validate()?;
        self.augment.params.validate()?;
        if self.grid.is_empty() || self.grid.contains(&0) {
            return Err(cxrtl_core::Error::Validation(format!(
                "grid must hold positive widths, got {:?}",
                self.grid
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_lists_every_default_and_round_trips() {
        let spec = RunSpec::default();
        let text = spec.to_toml().unwrap();
        for key in [
            "batch_size = 30",
            "epochs = 15",
            "base_lr = 0.001",
            "lr_decay = 0.1",
            "lr_step = 5",
            "optimizer = \"adam\"",
            "transform = \"hflip\"",
            "input_size = 224",
            "crop_resize = 280",
            "grid = [",
        ] {
            assert!(text.contains(key), "missing {key:?} in\n{text}");
        }
        let back: RunSpec = toml::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn overrides_take_precedence() {
        let o = Overrides {
            seed: Some(9),
            strategy: Some(Strategy::OneChannel),
            n_neurons: Some(500),
            epochs: Some(2),
            no_pretrained: true,
            ..Overrides::default()
        };
        let spec = RunSpec::resolve(None, &o).unwrap();
        assert_eq!(spec.seed, 9);
        assert_eq!(spec.model.strategy, Strategy::OneChannel);
        assert_eq!(spec.model.n_neurons, 500);
        assert_eq!(spec.train.epochs, 2);
        assert!(!spec.model.pretrained);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunSpec>("sed = 3").is_err());
        let partial: RunSpec = toml::from_str("seed = 3\n[train]\nepochs = 4\n").unwrap();
        assert_eq!(partial.train.epochs, 4);
        assert_eq!(partial.train.batch_size, 30);
    }
}
