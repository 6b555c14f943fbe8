//! Mini-batch optimization, the step-decay schedule, best-epoch
//! checkpointing, the hidden-width sweep and the augmentation ablation.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{build_training_set, PreparedSample, SourceSet, TrainingSet, TransformSpec};
use crate::backbone::{apply_strategy, load_backbone, AdaptedModel, LoadOptions, Strategy, StrategyConfig};
use crate::dataset::NormStats;
use crate::error::{Error, Result};
use crate::metrics::{compare_runs, evaluate_model, predict};
use crate::nn::layers::{argmax_rows, cross_entropy};
use crate::nn::params::Snapshot;
use crate::nn::tiny::TinyCnn;
use crate::nn::{Mode, Network};
use crate::optim::{Optim, OptimizerKind};
use crate::seed::{Rng, SeedBank};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    /// Epochs between learning-rate decays.
    pub lr_step: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 30,
            epochs: 15,
            base_lr: 1e-3,
            lr_decay: 0.1,
            lr_step: 5,
            seed: 0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be at least 1".into()));
        }
        if self.lr_step == 0 {
            return Err(Error::Validation("lr_step must be at least 1".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Validation(format!(
                "lr_decay must lie in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Validation(format!(
                "base_lr must be positive, got {}",
                self.base_lr
            )));
        }
        Ok(())
    }

    /// Gradient steps in one epoch over `n` samples (final partial batch kept).
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// `base_lr · lr_decay^⌊epoch / lr_step⌋`.
pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> f64 {
    let decays = (epoch / cfg.lr_step.max(1)) as i32;
    cfg.base_lr * cfg.lr_decay.powi(decays)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub mean_train_loss: f64,
    pub lr: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestEpoch {
    pub epoch: usize,
    pub val_accuracy: f64,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub label: String,
    pub n_neurons: Option<usize>,
    pub records: Vec<EpochRecord>,
    pub best: Option<BestEpoch>,
}

impl RunHistory {
    pub fn new(label: impl Into<String>, n_neurons: Option<usize>) -> Self {
        Self {
            label: label.into(),
            n_neurons,
            records: Vec::new(),
            best: None,
        }
    }

    /// Append a record; returns true when it strictly improves on the best
    /// validation accuracy so far.
    pub fn push(&mut self, record: EpochRecord) -> bool {
        let improved = self.best.as_ref().is_none_or(|b| record.val_accuracy > b.val_accuracy);
        if improved {
            self.best = Some(BestEpoch {
                epoch: record.epoch,
                val_accuracy: record.val_accuracy,
                checkpoint: None,
            });
        }
        self.records.push(record);
        improved
    }

    /// One JSON record per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            writeln!(w).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path, label: impl Into<String>, n_neurons: Option<usize>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut history = RunHistory::new(label, n_neurons);
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            history.push(serde_json::from_str(line)?);
        }
        Ok(history)
    }
}

/// Stack single-channel samples into `(B, C, H, W)` inputs (channels
/// replicated when `C = 3`) and `(B,)` class targets.
pub fn assemble_batch(samples: &[&PreparedSample], channels: usize, dtype: DType) -> Result<(Tensor, Tensor)> {
    let first = samples.first().ok_or_else(|| Error::Validation("empty batch".into()))?;
    let (w, h) = (first.pixels.width(), first.pixels.height());
    if channels != 1 && channels != 3 {
        return Err(Error::Validation(format!("unsupported channel count {channels}")));
    }
    let mut data = Vec::with_capacity(samples.len() * w * h);
    for s in samples {
        if s.pixels.width() != w || s.pixels.height() != h {
            return Err(Error::Validation(format!(
                "batch mixes {w}x{h} and {}x{} images",
                s.pixels.width(),
                s.pixels.height()
            )));
        }
        data.extend_from_slice(s.pixels.pixels());
    }
    let x = Tensor::from_vec(data, (samples.len(), 1, h, w), &Device::Cpu)?.to_dtype(dtype)?;
    let x = if channels == 3 { x.repeat((1, 3, 1, 1))? } else { x };
    let targets: Vec<u32> = samples.iter().map(|s| s.label.index() as u32).collect();
    let y = Tensor::from_vec(targets, samples.len(), &Device::Cpu)?;
    Ok((x, y))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochOutcome {
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub steps: usize,
    /// Sample indices in the order they were visited.
    pub visit_order: Vec<usize>,
}

/// One pass over `samples` in seeded random order with one optimizer step per
/// batch. Accuracy is counted on the training-mode logits of each batch.
pub fn train_epoch(
    model: &dyn Network,
    optim: &mut Optim,
    samples: &[PreparedSample],
    cfg: &TrainConfig,
    epoch: usize,
    rng: &mut Rng,
) -> Result<EpochOutcome> {
    if samples.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let lr = lr_at_epoch(epoch, cfg);
    optim.set_learning_rate(lr);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);

    let dtype = model.store().dtype();
    let (mut loss_sum, mut correct, mut steps) = (0.0, 0usize, 0usize);
    for (batch, ids) in order.chunks(cfg.batch_size).enumerate() {
        let refs: Vec<&PreparedSample> = ids.iter().map(|&i| &samples[i]).collect();
        let (x, y) = assemble_batch(&refs, model.input_channels(), dtype)?;
        let logits = model.forward(&x, &mut Mode::Train(rng))?;
        let loss = cross_entropy(&logits, &y)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                loss: value,
                epoch,
                batch,
                lr,
            });
        }
        optim.step(&loss.backward()?)?;
        let (preds, _) = argmax_rows(&logits)?;
        correct += preds.iter().zip(&refs).filter(|(p, s)| **p == s.label.index()).count();
        loss_sum += value * ids.len() as f64;
        steps += 1;
    }
    Ok(EpochOutcome {
        mean_loss: loss_sum / samples.len() as f64,
        train_accuracy: correct as f64 / samples.len() as f64,
        steps,
        visit_order: order,
    })
}

/// Training samples that may change from epoch to epoch.
pub trait EpochSamples {
    fn samples_for_epoch(&mut self, epoch: usize) -> Result<&[PreparedSample]>;
}

impl EpochSamples for TrainingSet {
    fn samples_for_epoch(&mut self, epoch: usize) -> Result<&[PreparedSample]> {
        self.refresh(epoch)?;
        Ok(self.samples())
    }
}

impl EpochSamples for Vec<PreparedSample> {
    fn samples_for_epoch(&mut self, _epoch: usize) -> Result<&[PreparedSample]> {
        Ok(self)
    }
}

/// Checkpoint metadata stored next to the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub label: String,
    pub epoch: usize,
    pub val_accuracy: f64,
    pub trainable_checksum: String,
    pub backbone_checksum: String,
}

pub type EpochCallback<'a> = Box<dyn FnMut(&EpochRecord) + 'a>;

#[derive(Default)]
pub struct FitOptions<'a> {
    pub label: String,
    pub n_neurons: Option<usize>,
    /// Directory for `history.jsonl` and `checkpoints/`; nothing is written when unset.
    pub run_dir: Option<PathBuf>,
    /// Load the best-validation weights back into the model after the last epoch.
    pub restore_best: bool,
    pub on_epoch: Option<EpochCallback<'a>>,
}

pub struct FitResult {
    pub history: RunHistory,
    pub best_snapshot: Option<Snapshot>,
}

fn write_checkpoint(model: &dyn Network, dir: &Path, name: &str, meta: &CheckpointMeta) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let weights = dir.join(format!("{name}.safetensors"));
    model.store().save_safetensors(&weights)?;
    let json = dir.join(format!("{name}.json"));
    fs::write(&json, serde_json::to_string_pretty(meta)?).map_err(|e| Error::io(&json, e))?;
    Ok(weights)
}

fn checkpoint_meta(model: &dyn Network, label: &str, record: &EpochRecord) -> Result<CheckpointMeta> {
    let store = model.store();
    let trainable: Vec<String> = store.trainable_names();
    Ok(CheckpointMeta {
        label: label.to_string(),
        epoch: record.epoch,
        val_accuracy: record.val_accuracy,
        trainable_checksum: store.checksum(|n| trainable.iter().any(|t| t == n))?,
        backbone_checksum: store.checksum(|n| !trainable.iter().any(|t| t == n))?,
    })
}

/// Train for `cfg.epochs`, scoring validation accuracy in inference mode after
/// each epoch and keeping the weights of the first epoch with the highest
/// validation accuracy.
pub fn fit(
    model: &dyn Network,
    train: &mut dyn EpochSamples,
    val: &[PreparedSample],
    cfg: &TrainConfig,
    mut opts: FitOptions<'_>,
) -> Result<FitResult> {
    cfg.validate()?;
    model.check_consistency()?;
    let mut history = RunHistory::new(opts.label.clone(), opts.n_neurons);
    let history_path = opts.run_dir.as_ref().map(|d| d.join("history.jsonl"));
    if let Some(dir) = &opts.run_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        history.write_jsonl(history_path.as_deref().unwrap())?;
    }
    if cfg.epochs == 0 {
        log::warn!("{}: epochs = 0, nothing to train", opts.label);
        return Ok(FitResult {
            history,
            best_snapshot: None,
        });
    }
    if val.is_empty() {
        return Err(Error::Validation("validation set is empty".into()));
    }

    let seeds = SeedBank::new(cfg.seed);
    let mut optim = Optim::new(cfg.optimizer, model.store().trainable_vars(), cfg.base_lr)?;
    let mut best_snapshot = None;
    let checkpoint_dir = opts.run_dir.as_ref().map(|d| d.join("checkpoints"));
    for epoch in 0..cfg.epochs {
        let samples = train.samples_for_epoch(epoch)?;
        let mut rng = seeds.rng_indexed("epoch", epoch as u64);
        let outcome = train_epoch(model, &mut optim, samples, cfg, epoch, &mut rng)?;
        let val_eval = evaluate_model(model, val, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_accuracy: outcome.train_accuracy,
            val_accuracy: val_eval.metrics.accuracy,
            mean_train_loss: outcome.mean_loss,
            lr: lr_at_epoch(epoch, cfg),
            steps: outcome.steps,
        };
        log::info!(
            "{} epoch {epoch}: lr {:.1e} loss {:.4} train {:.4} val {:.4}",
            opts.label,
            record.lr,
            record.mean_train_loss,
            record.train_accuracy,
            record.val_accuracy
        );
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&record);
        }
        let improved = history.push(record.clone());
        if improved {
            best_snapshot = Some(model.store().snapshot()?);
            if let Some(dir) = &checkpoint_dir {
                let meta = checkpoint_meta(model, &opts.label, &record)?;
                let path = write_checkpoint(model, dir, "best", &meta)?;
                if let Some(best) = history.best.as_mut() {
                    best.checkpoint = Some(path);
                }
            }
        }
        if let Some(path) = &history_path {
            history.write_jsonl(path)?;
        }
    }
    if let (Some(dir), Some(last)) = (&checkpoint_dir, history.records.last()) {
        let meta = checkpoint_meta(model, &opts.label, last)?;
        write_checkpoint(model, dir, "last", &meta)?;
    }
    if opts.restore_best {
        if let Some(snap) = &best_snapshot {
            model.store().restore(snap)?;
        }
    }
    Ok(FitResult { history, best_snapshot })
}

/// Build a fresh model for a strategy. Initialization seeds derive from `seed`.
pub fn build_model(cfg: &StrategyConfig, weights: Option<&Path>, seed: u64) -> Result<AdaptedModel> {
    cfg.validate()?;
    let opts = LoadOptions {
        pretrained: cfg.pretrained,
        weights: weights.map(Path::to_path_buf),
        seed,
        dtype: DType::F32,
    };
    apply_strategy(load_backbone(cfg.backbone, &opts)?, cfg)
}

pub struct SweepCell {
    pub n_neurons: usize,
    pub seed: u64,
    pub history: RunHistory,
}

pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    /// Index into `cells` of the selected run.
    pub best: usize,
}

/// Seed for one sweep cell, a function of the run seed and the width only.
pub fn sweep_cell_seed(seed: u64, n_neurons: usize) -> u64 {
    SeedBank::new(seed).derive_indexed("sweep", n_neurons as u64)
}

/// One `fit` per hidden width. `on_cell` sees each trained model (with its
/// best weights restored) before it is dropped.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    base: &StrategyConfig,
    grid: &[usize],
    weights: Option<&Path>,
    train: &mut dyn EpochSamples,
    val: &[PreparedSample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    on_cell: &mut dyn FnMut(&SweepCell, &AdaptedModel) -> Result<()>,
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::Validation("sweep grid is empty".into()));
    }
    if base.strategy == Strategy::Full {
        return Err(Error::Validation(
            "the hidden-width sweep applies to strategies I and II only".into(),
        ));
    }
    let mut seen = grid.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != grid.len() {
        return Err(Error::Validation(format!("sweep grid {grid:?} has duplicates")));
    }

    let mut cells = Vec::with_capacity(grid.len());
    for &n in grid {
        let cell_cfg = StrategyConfig {
            n_neurons: n,
            ..base.clone()
        };
        let seed = sweep_cell_seed(cfg.seed, n);
        let model = build_model(&cell_cfg, weights, seed)?;
        let label = format!("{}-{}-n{n}", cell_cfg.backbone, cell_cfg.experiment_id());
        let opts = FitOptions {
            label,
            n_neurons: Some(n),
            run_dir: out_dir.map(|d| d.join(format!("n{n}"))),
            restore_best: true,
            on_epoch: None,
        };
        let cell_train = TrainConfig { seed, ..cfg.clone() };
        let fitted = fit(&model, train, val, &cell_train, opts)?;
        let cell = SweepCell {
            n_neurons: n,
            seed,
            history: fitted.history,
        };
        on_cell(&cell, &model)?;
        cells.push(cell);
    }
    let best = (0..cells.len())
        .min_by(|&a, &b| compare_runs(&cells[a].history, &cells[b].history))
        .unwrap_or(0);
    Ok(SweepResult { cells, best })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub transform: String,
    pub test_accuracy: f64,
    pub best_val_accuracy: f64,
    pub best_epoch: Option<usize>,
}

/// Train the reference CNN on originals plus each single transform and score
/// it on the test set. Rows come back ranked by test accuracy (stable).
pub fn augmentation_ablation(
    sources: &SourceSet,
    val: &[PreparedSample],
    test: &[PreparedSample],
    stats: &NormStats,
    transforms: &[TransformSpec],
    cfg: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    if transforms.is_empty() {
        return Err(Error::Validation("no transforms to compare".into()));
    }
    let seeds = SeedBank::new(cfg.seed);
    let mut rows = Vec::with_capacity(transforms.len());
    for spec in transforms {
        let mut train = build_training_set(sources.clone(), *spec, stats, seeds.derive("ablation/augment"))?;
        // identical initialization for every transform
        let model = TinyCnn::new(&seeds.child("ablation/init", 0), DType::F32)?;
        let opts = FitOptions {
            label: format!("reference-cnn-{}", spec.kind),
            restore_best: true,
            ..FitOptions::default()
        };
        let fitted = fit(&model, &mut train, val, cfg, opts)?;
        let (preds, _) = predict(&model, test, cfg.batch_size)?;
        let correct = preds.iter().zip(test).filter(|(p, s)| **p == s.label.index()).count();
        let best = fitted.history.best.as_ref();
        rows.push(AblationRow {
            transform: spec.kind.name().to_string(),
            test_accuracy: if test.is_empty() {
                0.0
            } else {
                correct as f64 / test.len() as f64
            },
            best_val_accuracy: best.map_or(0.0, |b| b.val_accuracy),
            best_epoch: best.map(|b| b.epoch),
        });
    }
    rows.sort_by(|a, b| b.test_accuracy.total_cmp(&a.test_accuracy));
    Ok(rows)
}
