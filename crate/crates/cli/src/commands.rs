//! Command implementations. Each returns a summary for `main` to print and
//! writes its artifacts below the chosen output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cxrtl_core::augment::{build_training_set, prepare_eval_set, preview_grid, rng_from_seed, SourceSet};
use cxrtl_core::augment::{AugmentParams, TransformSpec};
use cxrtl_core::dataset::{compute_norm_stats, rebalance_downsample, repartition_eval, scan_dataset};
use cxrtl_core::imaging::{load_grayscale, save_png};
use cxrtl_core::metrics::{compare_runs, evaluate_model, Evaluation, MetricsRow};
use cxrtl_core::train::{augmentation_ablation, build_model, fit, sweep, AblationRow, FitOptions, RunHistory};
use cxrtl_core::{
    apply_strategy, load_backbone, LoadOptions, Manifest, Network, NormStats, PreparedSample, Split, StrategyConfig,
};
use serde::{Deserialize, Serialize};

use crate::config::{RunSpec, MANIFEST_FILE, SPEC_FILE, STATS_FILE};
use crate::report::{render_curves, render_table};

pub const METRICS_FILE: &str = "metrics.json";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrepareSummary {
    pub train: [usize; 2],
    pub val: [usize; 2],
    pub test: [usize; 2],
    pub warnings: Vec<String>,
}

impl PrepareSummary {
    pub fn lines(&self) -> Vec<String> {
        vec![
            format!("train: {}/{}", self.train[0], self.train[1]),
            format!("val: {}", self.val[0] + self.val[1]),
            format!("test: {}", self.test[0] + self.test[1]),
        ]
    }
}

fn refuse_inside(out: &Path, root: &Path) -> Result<()> {
    let out_abs = std::path::absolute(out)?;
    let root_abs = std::path::absolute(root)?;
    if out_abs.starts_with(&root_abs) {
        bail!(cxrtl_core::Error::Validation(format!(
            "output {} lies inside the dataset root {}; choose a directory outside it",
            out.display(),
            root.display()
        )));
    }
    Ok(())
}

/// Scan, repartition the evaluation splits, balance the training split,
/// compute normalization statistics, and persist manifest and statistics.
pub fn cmd_prepare(root: &Path, out: &Path, seed: u64) -> Result<PrepareSummary> {
    refuse_inside(out, root)?;
    let seeds = cxrtl_core::SeedBank::new(seed);
    let scan = scan_dataset(root)?;
    for w in &scan.warnings {
        log::warn!("{w}");
    }
    let (val, test) = repartition_eval(
        scan.split(Split::Test),
        scan.split(Split::Val),
        seeds.derive("repartition"),
    )?;
    let train = rebalance_downsample(scan.split(Split::Train), seeds.derive("downsample"))?;
    let stats = compute_norm_stats(&train)?;
    log::info!("normalization statistics: mean {:.6}, std {:.6}", stats.mean, stats.std);

    create_dir(out)?;
    let manifest = Manifest { train, val, test };
    manifest.write(&out.join(MANIFEST_FILE))?;
    stats.write(&out.join(STATS_FILE))?;
    let summary = PrepareSummary {
        train: manifest.train.counts(),
        val: manifest.val.counts(),
        test: manifest.test.counts(),
        warnings: scan.warnings,
    };
    let mut text = summary.lines().join("\n");
    text.push('\n');
    write(&out.join("prepare_summary.txt"), text)?;
    Ok(summary)
}

/// Manifest and statistics for a run, preparing them first when needed.
pub fn ensure_prepared(spec: &RunSpec) -> Result<(Manifest, NormStats)> {
    let dir = spec.prepared_dir();
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        if spec.prepared.is_some() {
            bail!(cxrtl_core::Error::Config(format!(
                "no manifest at {}; run `cxrtl prepare` first",
                manifest_path.display()
            )));
        }
        log::info!("preparing {} into {}", spec.data_root.display(), dir.display());
        cmd_prepare(&spec.data_root, &dir, spec.seed)?;
    }
    let manifest = Manifest::read(&manifest_path)?;
    let stats = NormStats::read(&dir.join(STATS_FILE))?;
    Ok((manifest, stats))
}

/// Everything written to `metrics.json` for one trained model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetrics {
    pub row: MetricsRow,
    pub split: Split,
    pub evaluation: Evaluation,
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
    pub epochs_run: usize,
    pub trainable_params: usize,
    pub frozen_params: usize,
    pub optimizer: String,
    pub base_lr: f64,
    pub seed: u64,
    pub weights_sha256: Option<String>,
    pub history: String,
}

fn metrics_row(cfg: &StrategyConfig, eval: &Evaluation) -> MetricsRow {
    let n = cfg.strategy.has_hidden_layer().then_some(cfg.n_neurons);
    MetricsRow::new(&cfg.experiment_id(), cfg.backbone.name(), n, &eval.metrics)
}

struct EvalSets {
    val: Vec<PreparedSample>,
    test: Vec<PreparedSample>,
}

fn eval_sets(manifest: &Manifest, params: &AugmentParams, stats: &NormStats) -> Result<EvalSets> {
    Ok(EvalSets {
        val: prepare_eval_set(&SourceSet::from_index(&manifest.val), params, stats)?,
        test: prepare_eval_set(&SourceSet::from_index(&manifest.test), params, stats)?,
    })
}

fn progress(label: String) -> Box<dyn FnMut(&cxrtl_core::EpochRecord)> {
    Box::new(move |r| {
        println!(
            "{label} epoch {:>2}  lr {:.1e}  loss {:.4}  train {:.4}  val {:.4}",
            r.epoch, r.lr, r.mean_train_loss, r.train_accuracy, r.val_accuracy
        );
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub history: RunHistory,
    pub metrics: Option<RunMetrics>,
}

/// Assemble the augmented training set, fit, and evaluate the best-validation
/// weights on the test split.
pub fn cmd_train(spec: &RunSpec) -> Result<TrainOutcome> {
    spec.validate()?;
    let out = spec.out.clone();
    create_dir(&out)?;
    spec.save(&out.join(SPEC_FILE))?;

    let (manifest, stats) = ensure_prepared(spec)?;
    let seeds = spec.seeds();
    let cfg = spec.strategy_config();
    let train_cfg = spec.train_config();
    let model = build_model(&cfg, spec.model.weights.as_deref(), seeds.derive("model"))?;
    let census = model.census();
    log::info!(
        "{}: {} trainable / {} frozen parameters",
        model.describe(),
        census.trainable,
        census.frozen
    );

    let mut train = build_training_set(
        SourceSet::from_index(&manifest.train),
        spec.transform_spec(),
        &stats,
        seeds.derive("augment"),
    )?;
    log::info!(
        "training set: {} samples, {} steps per epoch",
        train.len(),
        train_cfg.steps_per_epoch(train.len())
    );
    let sets = eval_sets(&manifest, &spec.augment.params, &stats)?;

    let label = format!("{}-{}", cfg.backbone, cfg.experiment_id());
    let opts = FitOptions {
        label: label.clone(),
        n_neurons: cfg.strategy.has_hidden_layer().then_some(cfg.n_neurons),
        run_dir: Some(out.clone()),
        restore_best: true,
        on_epoch: Some(progress(label)),
    };
    let fitted = fit(&model, &mut train, &sets.val, &train_cfg, opts)?;
    let history = fitted.history;
    if history.records.is_empty() {
        log::warn!("no epochs were run; skipping evaluation");
        return Ok(TrainOutcome {
            run_dir: out,
            history,
            metrics: None,
        });
    }

    let eval = evaluate_model(&model, &sets.test, train_cfg.batch_size)?;
    let metrics = RunMetrics {
        row: metrics_row(&cfg, &eval),
        split: Split::Test,
        evaluation: eval,
        best_epoch: history.best.as_ref().map(|b| b.epoch),
        best_val_accuracy: history.best.as_ref().map(|b| b.val_accuracy),
        epochs_run: history.records.len(),
        trainable_params: census.trainable,
        frozen_params: census.frozen,
        optimizer: train_cfg.optimizer.to_string(),
        base_lr: train_cfg.base_lr,
        seed: spec.seed,
        weights_sha256: model.meta().weights_sha256.clone(),
        history: "history.jsonl".into(),
    };
    write_run_outputs(&out, &metrics, &history)?;
    Ok(TrainOutcome {
        run_dir: out,
        history,
        metrics: Some(metrics),
    })
}

fn write_run_outputs(dir: &Path, metrics: &RunMetrics, history: &RunHistory) -> Result<()> {
    write(&dir.join(METRICS_FILE), serde_json::to_string_pretty(metrics)?)?;
    let (csv_text, text) = render_table(std::slice::from_ref(&metrics.row))?;
    write(&dir.join("metrics.csv"), csv_text)?;
    write(&dir.join("metrics.txt"), text)?;
    render_curves(std::slice::from_ref(history), dir, "curves")?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_neurons: usize,
    pub seed: u64,
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
    pub test_accuracy: f64,
    pub recall_1: f64,
    pub f1_1: f64,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub best_n_neurons: usize,
}

pub fn cmd_sweep(spec: &RunSpec) -> Result<SweepOutcome> {
    spec.validate()?;
    let out = spec.out.clone();
    create_dir(&out)?;
    spec.save(&out.join(SPEC_FILE))?;

    let (manifest, stats) = ensure_prepared(spec)?;
    let seeds = spec.seeds();
    let base = spec.strategy_config();
    let train_cfg = spec.train_config();
    let mut train = build_training_set(
        SourceSet::from_index(&manifest.train),
        spec.transform_spec(),
        &stats,
        seeds.derive("augment"),
    )?;
    let sets = eval_sets(&manifest, &spec.augment.params, &stats)?;

    let mut rows = Vec::new();
    let mut on_cell =
        |cell: &cxrtl_core::train::SweepCell, model: &cxrtl_core::AdaptedModel| -> cxrtl_core::Result<()> {
            let eval = evaluate_model(model, &sets.test, train_cfg.batch_size)?;
            let census = model.census();
            let cfg = StrategyConfig {
                n_neurons: cell.n_neurons,
                ..base.clone()
            };
            let metrics = RunMetrics {
                row: metrics_row(&cfg, &eval),
                split: Split::Test,
                evaluation: eval.clone(),
                best_epoch: cell.history.best.as_ref().map(|b| b.epoch),
                best_val_accuracy: cell.history.best.as_ref().map(|b| b.val_accuracy),
                epochs_run: cell.history.records.len(),
                trainable_params: census.trainable,
                frozen_params: census.frozen,
                optimizer: train_cfg.optimizer.to_string(),
                base_lr: train_cfg.base_lr,
                seed: cell.seed,
                weights_sha256: model.meta().weights_sha256.clone(),
                history: "history.jsonl".into(),
            };
            let dir = out.join(format!("n{}", cell.n_neurons));
            if !cell.history.records.is_empty() {
                write_run_outputs(&dir, &metrics, &cell.history).map_err(|e| cxrtl_core::Error::Io {
                    path: dir.clone(),
                    source: std::io::Error::other(format!("{e:#}")),
                })?;
            }
            println!(
                "n_neurons {:>4}: best val {:.4} at epoch {:?}, test accuracy {:.4}",
                cell.n_neurons,
                metrics.best_val_accuracy.unwrap_or(0.0),
                metrics.best_epoch,
                eval.metrics.accuracy
            );
            rows.push(SweepRow {
                n_neurons: cell.n_neurons,
                seed: cell.seed,
                best_epoch: metrics.best_epoch,
                best_val_accuracy: metrics.best_val_accuracy,
                test_accuracy: eval.metrics.accuracy,
                recall_1: eval.metrics.per_class[1].recall,
                f1_1: eval.metrics.per_class[1].f1,
            });
            Ok(())
        };
    let result = sweep(
        &base,
        &spec.grid,
        spec.model.weights.as_deref(),
        &mut train,
        &sets.val,
        &train_cfg,
        Some(&out),
        &mut on_cell,
    )?;
    let best_n = result.cells[result.best].n_neurons;

    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    write(&out.join("sweep_summary.csv"), w.into_inner()?)?;
    let mut text = String::from("n_neurons  best_epoch  best_val  test_acc  recall_1  f1_1\n");
    for r in &rows {
        text.push_str(&format!(
            "{:<9}  {:<10}  {:.4}    {:.4}    {:.4}    {:.4}{}\n",
            r.n_neurons,
            r.best_epoch.map_or("-".to_string(), |e| e.to_string()),
            r.best_val_accuracy.unwrap_or(0.0),
            r.test_accuracy,
            r.recall_1,
            r.f1_1,
            if r.n_neurons == best_n { "  *" } else { "" }
        ));
    }
    write(&out.join("sweep_summary.txt"), text)?;
    write(&out.join("best.txt"), format!("n{best_n}\n"))?;
    #[cfg(unix)]
    {
        let link = out.join("best");
        let _ = fs::remove_file(&link);
        if let Err(e) = std::os::unix::fs::symlink(format!("n{best_n}"), &link) {
            log::warn!("could not link {}: {e}", link.display());
        }
    }
    let histories: Vec<RunHistory> = result
        .cells
        .iter()
        .filter(|c| !c.history.records.is_empty())
        .map(|c| RunHistory {
            label: format!("n={}", c.n_neurons),
            ..c.history.clone()
        })
        .collect();
    if !histories.is_empty() {
        render_curves(&histories, &out, "curves")?;
    }
    Ok(SweepOutcome {
        rows,
        best_n_neurons: best_n,
    })
}

pub const ABLATION_NOTE: &str = "reference network: three blocks of 3x3 convolution, ReLU and 2x2 max pooling \
(16/32/64 channels), global average pooling, 2-way linear output; defined by this tool to rank augmentations";

pub fn cmd_ablate(spec: &RunSpec) -> Result<Vec<AblationRow>> {
    spec.validate()?;
    if spec.augment.ablation.is_empty() {
        bail!(cxrtl_core::Error::Validation(
            "augment.ablation lists no transforms".into()
        ));
    }
    let out = spec.out.clone();
    create_dir(&out)?;
    spec.save(&out.join(SPEC_FILE))?;
    let (manifest, stats) = ensure_prepared(spec)?;
    let sets = eval_sets(&manifest, &spec.augment.params, &stats)?;
    let transforms: Vec<TransformSpec> = spec
        .augment
        .ablation
        .iter()
        .map(|&kind| TransformSpec {
            kind,
            params: spec.augment.params,
        })
        .collect();
    let rows = augmentation_ablation(
        &SourceSet::from_index(&manifest.train),
        &sets.val,
        &sets.test,
        &stats,
        &transforms,
        &spec.train_config(),
    )?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    write(&out.join("ablation.csv"), w.into_inner()?)?;
    let mut text = format!("{ABLATION_NOTE}\n\nrank  transform         test_accuracy\n");
    for (i, r) in rows.iter().enumerate() {
        text.push_str(&format!("{:<4}  {:<16}  {:.4}\n", i + 1, r.transform, r.test_accuracy));
    }
    write(&out.join("ablation.txt"), text)?;
    Ok(rows)
}

/// Re-evaluate a finished run's checkpoint on one split.
pub fn cmd_evaluate(run_dir: &Path, split: Split, checkpoint: Option<&Path>) -> Result<RunMetrics> {
    let spec = RunSpec::load(&run_dir.join(SPEC_FILE))?;
    let (manifest, stats) = ensure_prepared(&spec)?;
    let cfg = spec.strategy_config();
    // weights come from the checkpoint, so build without ImageNet weights
    let scratch = StrategyConfig {
        pretrained: false,
        ..cfg.clone()
    };
    let model = apply_strategy(
        load_backbone(cfg.backbone, &LoadOptions::scratch(spec.seeds().derive("model")))?,
        &scratch,
    )?;
    let ckpt = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run_dir.join("checkpoints/best.safetensors"));
    model
        .store()
        .load_safetensors(&ckpt)
        .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let samples = prepare_eval_set(
        &SourceSet::from_index(manifest.split(split)),
        &spec.augment.params,
        &stats,
    )?;
    let eval = evaluate_model(&model, &samples, spec.train.batch_size)?;
    let census = model.census();
    let metrics = RunMetrics {
        row: metrics_row(&cfg, &eval),
        split,
        evaluation: eval,
        best_epoch: None,
        best_val_accuracy: None,
        epochs_run: 0,
        trainable_params: census.trainable,
        frozen_params: census.frozen,
        optimizer: spec.train.optimizer.to_string(),
        base_lr: spec.train.base_lr,
        seed: spec.seed,
        weights_sha256: Some(cxrtl_core::nn::params::file_sha256(&ckpt)?),
        history: String::new(),
    };
    write(
        &run_dir.join(format!("eval_{split}.json")),
        serde_json::to_string_pretty(&metrics)?,
    )?;
    Ok(metrics)
}

fn find_metrics(root: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    if root.is_file() {
        if root.file_name().is_some_and(|n| n == METRICS_FILE) {
            found.push(root.to_path_buf());
        }
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(root)
        .with_context(|| format!("reading {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for path in entries {
        if path.is_symlink() {
            continue;
        }
        if path.is_dir() {
            find_metrics(&path, found)?;
        } else if path.file_name().is_some_and(|n| n == METRICS_FILE) {
            found.push(path);
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ReportOutcome {
    pub rows: Vec<MetricsRow>,
    pub table: String,
}

/// Gather every `metrics.json` under `roots`, keep the best run per
/// (experiment, backbone) and write the results table and curves.
pub fn cmd_report(roots: &[PathBuf], out: &Path) -> Result<ReportOutcome> {
    let mut files = Vec::new();
    for root in roots {
        find_metrics(root, &mut files)?;
    }
    if files.is_empty() {
        bail!(cxrtl_core::Error::Validation(
            "no metrics.json found under the given run directories".into()
        ));
    }

    struct Run {
        metrics: RunMetrics,
        history: RunHistory,
    }
    let mut groups: BTreeMap<(String, String), Vec<Run>> = BTreeMap::new();
    for f in &files {
        let metrics: RunMetrics =
            serde_json::from_str(&fs::read_to_string(f)?).with_context(|| format!("parsing {}", f.display()))?;
        let dir = f.parent().unwrap_or(Path::new("."));
        let label = format!(
            "{} {}{}",
            metrics.row.backbone,
            metrics.row.experiment,
            metrics.row.n_neurons.map_or(String::new(), |n| format!(" n={n}"))
        );
        let history_path = dir.join(&metrics.history);
        let history = if metrics.history.is_empty() || !history_path.exists() {
            RunHistory::new(label, metrics.row.n_neurons)
        } else {
            RunHistory::read_jsonl(&history_path, label, metrics.row.n_neurons)?
        };
        groups
            .entry((metrics.row.experiment.clone(), metrics.row.backbone.clone()))
            .or_default()
            .push(Run { metrics, history });
    }

    create_dir(out)?;
    let mut best_rows = Vec::new();
    let mut all_rows = Vec::new();
    let mut by_backbone: BTreeMap<String, Vec<RunHistory>> = BTreeMap::new();
    for runs in groups.values() {
        all_rows.extend(runs.iter().map(|r| r.metrics.row.clone()));
        let best = runs
            .iter()
            .min_by(|a, b| compare_runs(&a.history, &b.history))
            .expect("group is non-empty");
        best_rows.push(best.metrics.row.clone());
        for r in runs.iter().filter(|r| !r.history.records.is_empty()) {
            by_backbone
                .entry(r.metrics.row.backbone.clone())
                .or_default()
                .push(r.history.clone());
        }
    }
    let (csv_text, table) = render_table(&best_rows)?;
    write(&out.join("results.csv"), csv_text)?;
    write(&out.join("results.txt"), &table)?;
    let (all_csv, _) = render_table(&all_rows)?;
    write(&out.join("all_runs.csv"), all_csv)?;
    for (backbone, histories) in &by_backbone {
        render_curves(histories, out, &format!("curves_{backbone}"))?;
    }
    Ok(ReportOutcome {
        rows: crate::report::order_rows(&best_rows),
        table,
    })
}

/// Save a 2x2 grid showing the four augmenting transforms on one image.
pub fn cmd_preview(image: &Path, out: &Path, seed: u64, input_size: usize) -> Result<()> {
    let img = load_grayscale(image)?;
    let params = AugmentParams::with_input_size(input_size);
    let grid = preview_grid(&img, &params, &mut rng_from_seed(seed))?;
    save_png(&grid, out)?;
    Ok(())
}
