//! Backbone acquisition and surgery for the three transfer strategies.
//!
//! * Strategy I freezes the whole convolutional trunk and trains a new
//!   classifier head on 3-channel (replicated grayscale) input.
//! * Strategy II swaps the first convolution for a 1-input-channel one,
//!   trains it together with the head, and freezes the rest of the trunk.
//! * Strategy III trains everything, with the final classifier replaced by a
//!   2-way affine layer.
//!
//! Frozen trunk modules run batch normalization with stored statistics in
//! every mode. Parameter names follow torchvision so ImageNet weights exported
//! from it load directly.

use std::env;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{GrayImage, RawImage};
use crate::nn::densenet::{self, DenseNet121};
use crate::nn::layers::{dropout, Linear};
use crate::nn::params::{file_sha256, instantiate, Census, Init, ParamSpec, ParamStore, Role};
use crate::nn::resnet::{self, ResNet18};
use crate::nn::{Mode, Network};
use crate::seed::{Rng, SeedBank};

/// Directory searched for `<backbone>.safetensors` ImageNet weights.
pub const WEIGHTS_ENV: &str = "CXRTL_WEIGHTS_DIR";

pub const HEAD_DROPOUT: f64 = 0.2;

/// Hidden-layer sizes explored by the sweep.
pub const NEURON_GRID: [usize; 3] = [10, 100, 500];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Resnet18,
    Densenet121,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 2] = [BackboneKind::Resnet18, BackboneKind::Densenet121];

    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::Resnet18 => "resnet18",
            BackboneKind::Densenet121 => "densenet121",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            BackboneKind::Resnet18 => "ResNet-18",
            BackboneKind::Densenet121 => "DenseNet-121",
        }
    }

    /// Width of the pooled feature vector entering the classifier.
    pub fn feature_width(self) -> usize {
        match self {
            BackboneKind::Resnet18 => resnet::FEATURE_WIDTH,
            BackboneKind::Densenet121 => densenet::FEATURE_WIDTH,
        }
    }

    pub fn first_conv(self) -> &'static str {
        match self {
            BackboneKind::Resnet18 => resnet::FIRST_CONV,
            BackboneKind::Densenet121 => densenet::FIRST_CONV,
        }
    }

    /// Parameter-name prefix of the classifier that surgery replaces.
    pub fn classifier(self) -> &'static str {
        match self {
            BackboneKind::Resnet18 => resnet::CLASSIFIER,
            BackboneKind::Densenet121 => densenet::CLASSIFIER,
        }
    }

    pub fn param_specs(self) -> Vec<ParamSpec> {
        match self {
            BackboneKind::Resnet18 => resnet::param_specs(),
            BackboneKind::Densenet121 => densenet::param_specs(),
        }
    }

    pub fn weight_file_name(self) -> String {
        format!("{}.safetensors", self.name())
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "resnet18" => Ok(BackboneKind::Resnet18),
            "densenet121" => Ok(BackboneKind::Densenet121),
            other => Err(Error::Parse(format!("unknown backbone {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "I")]
    FrozenBackbone,
    #[serde(rename = "II")]
    OneChannel,
    #[serde(rename = "III")]
    Full,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::FrozenBackbone, Strategy::OneChannel, Strategy::Full];

    pub fn roman(self) -> &'static str {
        match self {
            Strategy::FrozenBackbone => "I",
            Strategy::OneChannel => "II",
            Strategy::Full => "III",
        }
    }

    pub fn input_channels(self) -> usize {
        match self {
            Strategy::OneChannel => 1,
            Strategy::FrozenBackbone | Strategy::Full => 3,
        }
    }

    pub fn has_hidden_layer(self) -> bool {
        self != Strategy::Full
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.roman())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "i" | "1" | "frozen" | "frozen_backbone" => Ok(Strategy::FrozenBackbone),
            "ii" | "2" | "one_channel" | "one-channel" => Ok(Strategy::OneChannel),
            "iii" | "3" | "full" => Ok(Strategy::Full),
            other => Err(Error::Parse(format!("unknown strategy {other:?}"))),
        }
    }
}

/// How the 1-channel first convolution of strategy II is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstConvInit {
    /// Sum of the pretrained kernel over its input channels; the adapted
    /// network then matches the replicated-channel network exactly.
    #[default]
    ChannelSum,
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub backbone: BackboneKind,
    pub strategy: Strategy,
    pub pretrained: bool,
    /// Hidden-layer width of the new head; unused by strategy III.
    pub n_neurons: usize,
    /// Must agree with the strategy when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_channels: Option<usize>,
    #[serde(default)]
    pub first_conv_init: FirstConvInit,
}

impl StrategyConfig {
    pub fn new(backbone: BackboneKind, strategy: Strategy, n_neurons: usize, pretrained: bool) -> Self {
        Self {
            backbone,
            strategy,
            pretrained,
            n_neurons,
            input_channels: None,
            first_conv_init: FirstConvInit::default(),
        }
    }

    pub fn channels(&self) -> usize {
        self.strategy.input_channels()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.input_channels {
            if c != self.channels() {
                return Err(Error::Validation(format!(
                    "strategy {} requires {} input channel(s), config requests {c}",
                    self.strategy,
                    self.channels()
                )));
            }
        }
        if self.strategy.has_hidden_layer() && self.n_neurons == 0 {
            return Err(Error::Validation("n_neurons must be at least 1".into()));
        }
        Ok(())
    }

    /// Row label in result tables: the strategy numeral, or `no-TL` for
    /// full training from random initialization.
    pub fn experiment_id(&self) -> String {
        match (self.pretrained, self.strategy) {
            (true, s) => s.roman().to_string(),
            (false, Strategy::Full) => "no-TL".to_string(),
            (false, s) => format!("{}-scratch", s.roman()),
        }
    }
}

/// Parameters of the replacement head:
/// dropout(0.2) → affine(n_input→n_neurons) → ReLU → affine(n_neurons→2).
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub hidden_weight: Tensor,
    pub hidden_bias: Tensor,
    pub out_weight: Tensor,
    pub out_bias: Tensor,
}

impl HeadParams {
    pub fn param_count(&self) -> usize {
        [&self.hidden_weight, &self.hidden_bias, &self.out_weight, &self.out_bias]
            .iter()
            .map(|t| t.elem_count())
            .sum()
    }

    /// Store under `<prefix>.1.*` and `<prefix>.3.*` (sequential indices).
    pub fn install(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        store.insert(&format!("{prefix}.1.weight"), self.hidden_weight.clone(), Role::Weight)?;
        store.insert(&format!("{prefix}.1.bias"), self.hidden_bias.clone(), Role::Weight)?;
        store.insert(&format!("{prefix}.3.weight"), self.out_weight.clone(), Role::Weight)?;
        store.insert(&format!("{prefix}.3.bias"), self.out_bias.clone(), Role::Weight)?;
        Ok(())
    }
}

pub fn build_head(n_input: usize, n_neurons: usize, rng: &mut Rng, dtype: DType) -> Result<HeadParams> {
    if n_input == 0 || n_neurons == 0 {
        return Err(Error::Validation(format!(
            "head dimensions must be positive (n_input {n_input}, n_neurons {n_neurons})"
        )));
    }
    let hidden = Init::linear_default(n_input);
    let out = Init::linear_default(n_neurons);
    Ok(HeadParams {
        hidden_weight: hidden.sample(&[n_neurons, n_input], rng, dtype)?,
        hidden_bias: hidden.sample(&[n_neurons], rng, dtype)?,
        out_weight: out.sample(&[2, n_neurons], rng, dtype)?,
        out_bias: out.sample(&[2], rng, dtype)?,
    })
}

#[derive(Debug, Clone)]
pub struct MlpHead {
    hidden: Linear,
    out: Linear,
}

impl MlpHead {
    pub fn load(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            hidden: Linear::load(store, &format!("{prefix}.1"))?,
            out: Linear::load(store, &format!("{prefix}.3"))?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        let x = match mode {
            Mode::Train(rng) => dropout(x, HEAD_DROPOUT, rng)?,
            Mode::Eval => x.clone(),
        };
        self.out.forward(&self.hidden.forward(&x)?.relu()?)
    }
}

#[derive(Debug, Clone)]
enum Head {
    /// Untouched ImageNet classifier (before surgery).
    Original(Linear),
    Mlp(MlpHead),
    Plain(Linear),
}

#[derive(Debug, Clone)]
enum Trunk {
    Resnet(ResNet18),
    Densenet(DenseNet121),
}

impl Trunk {
    fn load(kind: BackboneKind, store: &ParamStore) -> Result<Self> {
        Ok(match kind {
            BackboneKind::Resnet18 => Trunk::Resnet(ResNet18::load(store)?),
            BackboneKind::Densenet121 => Trunk::Densenet(DenseNet121::load(store)?),
        })
    }

    fn features(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            Trunk::Resnet(n) => n.features(x, train),
            Trunk::Densenet(n) => n.features(x, train),
        }
    }

    fn in_channels(&self) -> usize {
        match self {
            Trunk::Resnet(n) => n.in_channels(),
            Trunk::Densenet(n) => n.in_channels(),
        }
    }
}

/// Provenance of a loaded model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub backbone: BackboneKind,
    pub pretrained: bool,
    pub weights_path: Option<PathBuf>,
    pub weights_sha256: Option<String>,
    pub init_seed: u64,
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub pretrained: bool,
    /// Explicit weight file; otherwise `$CXRTL_WEIGHTS_DIR/<backbone>.safetensors`.
    pub weights: Option<PathBuf>,
    pub seed: u64,
    pub dtype: DType,
}

impl LoadOptions {
    pub fn scratch(seed: u64) -> Self {
        Self {
            pretrained: false,
            weights: None,
            seed,
            dtype: DType::F32,
        }
    }

    pub fn pretrained(weights: Option<PathBuf>, seed: u64) -> Self {
        Self {
            pretrained: true,
            weights,
            seed,
            dtype: DType::F32,
        }
    }
}

/// A backbone with its classifier, possibly after strategy surgery.
#[derive(Debug, Clone)]
pub struct AdaptedModel {
    store: ParamStore,
    trunk: Trunk,
    head: Head,
    config: Option<StrategyConfig>,
    meta: ModelMeta,
    seeds: SeedBank,
}

fn weights_hint(kind: BackboneKind) -> String {
    format!(
        "export ImageNet weights with `python scripts/export_torchvision_weights.py --arch {} --out <dir>` \
         (requires torch/torchvision and network access once), then set {WEIGHTS_ENV}=<dir> \
         or pass the file path explicitly",
        kind.name()
    )
}

pub fn resolve_weights_path(kind: BackboneKind, explicit: Option<&Path>) -> Result<PathBuf> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => match env::var_os(WEIGHTS_ENV) {
            Some(dir) => PathBuf::from(dir).join(kind.weight_file_name()),
            None => {
                return Err(Error::Weights {
                    path: PathBuf::from(kind.weight_file_name()),
                    reason: format!("no weight path given and {WEIGHTS_ENV} is unset"),
                    hint: weights_hint(kind),
                })
            }
        },
    };
    if !path.is_file() {
        return Err(Error::Weights {
            path,
            reason: "file not found".into(),
            hint: weights_hint(kind),
        });
    }
    Ok(path)
}

/// Instantiate a backbone with its original 1000-way classifier, either
/// seeded-random or from ImageNet weights.
pub fn load_backbone(kind: BackboneKind, opts: &LoadOptions) -> Result<AdaptedModel> {
    let seeds = SeedBank::new(opts.seed);
    let mut store = ParamStore::new(opts.dtype)?;
    instantiate(&mut store, &kind.param_specs(), &mut seeds.rng("init"))?;

    let mut meta = ModelMeta {
        backbone: kind,
        pretrained: opts.pretrained,
        weights_path: None,
        weights_sha256: None,
        init_seed: opts.seed,
    };
    if opts.pretrained {
        let path = resolve_weights_path(kind, opts.weights.as_deref())?;
        let corrupt = |reason: String| Error::Weights {
            path: path.clone(),
            reason,
            hint: weights_hint(kind),
        };
        let tensors = candle_core::safetensors::load(&path, &Device::Cpu)
            .map_err(|e| corrupt(format!("unreadable safetensors: {e}")))?;
        let classifier = format!("{}.weight", kind.classifier());
        let width = tensors
            .get(&classifier)
            .map(|t| t.dims().to_vec())
            .ok_or_else(|| corrupt(format!("missing {classifier}")))?;
        if width.len() != 2 || width[1] != kind.feature_width() {
            return Err(corrupt(format!(
                "{classifier} has shape {width:?}; expected feature width {}",
                kind.feature_width()
            )));
        }
        store.load_map(&tensors, &path).map_err(|e| match e {
            Error::Weights { path, reason, .. } => Error::Weights {
                path,
                reason,
                hint: weights_hint(kind),
            },
            other => other,
        })?;
        let digest = file_sha256(&path)?;
        log::info!("loaded {} weights from {} (sha256 {digest})", kind, path.display());
        meta.weights_sha256 = Some(digest);
        meta.weights_path = Some(path);
    }

    let trunk = Trunk::load(kind, &store)?;
    let head = Head::Original(Linear::load(&store, kind.classifier())?);
    Ok(AdaptedModel {
        store,
        trunk,
        head,
        config: None,
        meta,
        seeds,
    })
}

fn misuse(msg: String) -> Error {
    Error::Validation(msg)
}

/// Replace the 3-channel first convolution with a 1-channel one of the same
/// geometry and mark it trainable.
pub fn adapt_first_conv(mut model: AdaptedModel, cfg: &StrategyConfig) -> Result<AdaptedModel> {
    if cfg.strategy != Strategy::OneChannel {
        return Err(misuse(format!(
            "first-convolution adaptation belongs to strategy II, not {}",
            cfg.strategy
        )));
    }
    let kind = model.meta.backbone;
    let name = kind.first_conv();
    let shape = model.store.shape(name)?;
    if shape.len() != 4 || shape[1] != 3 {
        return Err(misuse(format!(
            "{name} has shape {shape:?}; expected a 3-input-channel kernel"
        )));
    }
    let (out_c, k) = (shape[0], shape[2]);
    let kernel = match cfg.first_conv_init {
        FirstConvInit::ChannelSum => model.store.var(name)?.as_tensor().detach().sum_keepdim(1)?,
        FirstConvInit::Random => {
            let fan = match kind {
                BackboneKind::Resnet18 => out_c * k * k,
                BackboneKind::Densenet121 => k * k,
            };
            Init::KaimingNormal { fan }.sample(
                &[out_c, 1, k, k],
                &mut model.seeds.rng("first_conv"),
                model.store.dtype(),
            )?
        }
    };
    model.store.insert(name, kernel, Role::Weight)?;
    model.store.set_trainable(|n| n == name, true);
    model.rebuild()?;
    Ok(model)
}

/// Perform the surgery and freezing for `cfg` on a freshly loaded model.
pub fn apply_strategy(model: AdaptedModel, cfg: &StrategyConfig) -> Result<AdaptedModel> {
    cfg.validate()?;
    if model.config.is_some() {
        return Err(misuse("strategy already applied to this model".into()));
    }
    if model.meta.backbone != cfg.backbone {
        return Err(misuse(format!(
            "model is {}, config asks for {}",
            model.meta.backbone, cfg.backbone
        )));
    }
    if model.meta.pretrained != cfg.pretrained {
        return Err(misuse(format!(
            "config pretrained={} but model was loaded with pretrained={}",
            cfg.pretrained, model.meta.pretrained
        )));
    }
    let kind = cfg.backbone;
    let classifier = kind.classifier();
    let mut model = model;
    model.store.remove_prefix(&format!("{classifier}."));
    let dtype = model.store.dtype();

    match cfg.strategy {
        Strategy::FrozenBackbone | Strategy::OneChannel => {
            model.store.set_trainable(|_| true, false);
            let head = build_head(kind.feature_width(), cfg.n_neurons, &mut model.seeds.rng("head"), dtype)?;
            head.install(&mut model.store, classifier)?;
            if cfg.strategy == Strategy::OneChannel {
                model = adapt_first_conv(model, cfg)?;
            }
        }
        Strategy::Full => {
            let width = kind.feature_width();
            let init = Init::linear_default(width);
            let mut rng = model.seeds.rng("head");
            let weight = init.sample(&[2, width], &mut rng, dtype)?;
            let bias = init.sample(&[2], &mut rng, dtype)?;
            model
                .store
                .insert(&format!("{classifier}.weight"), weight, Role::Weight)?;
            model.store.insert(&format!("{classifier}.bias"), bias, Role::Weight)?;
            model.store.set_trainable(|_| true, true);
        }
    }
    model.config = Some(cfg.clone());
    model.rebuild()?;
    debug_assert_eq!(model.input_channels(), cfg.channels());
    Ok(model)
}

impl AdaptedModel {
    fn rebuild(&mut self) -> Result<()> {
        let kind = self.meta.backbone;
        self.trunk = Trunk::load(kind, &self.store)?;
        let classifier = kind.classifier();
        self.head = if self.store.contains(&format!("{classifier}.1.weight")) {
            Head::Mlp(MlpHead::load(&self.store, classifier)?)
        } else {
            let linear = Linear::load(&self.store, classifier)?;
            if linear.out_features() == 2 {
                Head::Plain(linear)
            } else {
                Head::Original(linear)
            }
        };
        Ok(())
    }

    pub fn kind(&self) -> BackboneKind {
        self.meta.backbone
    }

    pub fn config(&self) -> Option<&StrategyConfig> {
        self.config.as_ref()
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    pub fn census(&self) -> Census {
        self.store.census()
    }

    pub fn feature_width(&self) -> usize {
        self.meta.backbone.feature_width()
    }

    /// Pooled trunk features, evaluated with stored normalization statistics.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.trunk.features(x, false)
    }

    fn is_head(&self, name: &str) -> bool {
        name.starts_with(&format!("{}.", self.meta.backbone.classifier()))
    }

    /// Checksum over every trunk weight and buffer.
    pub fn backbone_checksum(&self) -> Result<String> {
        self.store.checksum(|n| !self.is_head(n))
    }

    /// Checksum over the trunk excluding the first convolution kernel.
    pub fn backbone_checksum_without_first_conv(&self) -> Result<String> {
        let first = self.meta.backbone.first_conv();
        self.store.checksum(|n| !self.is_head(n) && n != first)
    }

    pub fn head_checksum(&self) -> Result<String> {
        self.store.checksum(|n| self.is_head(n))
    }

    fn strategy_channels_match(&self) -> Result<()> {
        if let Some(cfg) = &self.config {
            if self.input_channels() != cfg.channels() {
                return Err(Error::Validation(format!(
                    "strategy {} expects {} input channel(s) but the first convolution takes {}",
                    cfg.strategy,
                    cfg.channels(),
                    self.input_channels()
                )));
            }
        }
        Ok(())
    }
}

impl Network for AdaptedModel {
    fn forward(&self, x: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        let trunk_trains = match &self.config {
            Some(cfg) => cfg.strategy == Strategy::Full,
            None => true,
        };
        let features = self.trunk.features(x, mode.is_train() && trunk_trains)?;
        match &self.head {
            Head::Mlp(head) => head.forward(&features, mode),
            Head::Plain(l) | Head::Original(l) => l.forward(&features),
        }
    }

    fn input_channels(&self) -> usize {
        self.trunk.in_channels()
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn describe(&self) -> String {
        match &self.config {
            Some(cfg) => format!("{}/{}/n{}", cfg.backbone, cfg.experiment_id(), cfg.n_neurons),
            None => format!("{}/original", self.meta.backbone),
        }
    }

    fn check_consistency(&self) -> Result<()> {
        self.strategy_channels_match()
    }
}

/// Three identical channels from one, as an interleaved `H×W×3` array.
pub fn replicate_channels(image: &GrayImage) -> RawImage {
    let data = image.pixels().iter().flat_map(|&v| [v, v, v]).collect();
    RawImage {
        width: image.width(),
        height: image.height(),
        channels: 3,
        data,
    }
}

/// `(B, 1, H, W) -> (B, 3, H, W)` by channel replication.
pub fn replicate_channel_tensor(x: &Tensor) -> Result<Tensor> {
    let c = x.dims4()?.1;
    if c != 1 {
        return Err(Error::Validation(format!("expected 1 channel, got {c}")));
    }
    Ok(x.repeat((1, 3, 1, 1))?)
}
