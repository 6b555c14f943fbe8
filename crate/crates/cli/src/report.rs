//! Accuracy curves and result tables.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use anyhow::{bail, Context, Result};
use cxrtl_core::metrics::MetricsRow;
use cxrtl_core::train::RunHistory;
use plotters::prelude::*;
use plotters::style::FontStyle;

/// Environment variable naming a TTF/OTF file used for plot text.
pub const FONT_ENV: &str = "CXRTL_FONT";

const FONT_CANDIDATES: [&str; 4] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/Library/Fonts/Arial.ttf",
];

/// Register a system font with the plotting backend once per process.
/// Returns false when none is available; plots are then drawn without text.
fn fonts_available() -> bool {
    static READY: OnceLock<bool> = OnceLock::new();
    *READY.get_or_init(|| {
        let env_path = std::env::var_os(FONT_ENV).map(PathBuf::from);
        let candidates = env_path.into_iter().chain(FONT_CANDIDATES.iter().map(PathBuf::from));
        for path in candidates {
            let Ok(bytes) = fs::read(&path) else { continue };
            let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
            if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                return true;
            }
        }
        log::warn!("no usable font found (set {FONT_ENV}); plots will carry no text");
        false
    })
}

/// Y-axis limits padded around the data, clamped to `[0, 1]`.
pub fn curve_bounds(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let lo = (lo - 0.05).max(0.0).min(lo);
    let hi = (hi + 0.05).min(1.0).max(hi);
    if hi - lo < 1e-9 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Panel {
    Train,
    Val,
}

impl Panel {
    fn name(self) -> &'static str {
        match self {
            Panel::Train => "train",
            Panel::Val => "val",
        }
    }

    fn value(self, r: &cxrtl_core::EpochRecord) -> f64 {
        match self {
            Panel::Train => r.train_accuracy,
            Panel::Val => r.val_accuracy,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CurveFiles {
    pub csv: PathBuf,
    /// `(panel, svg, png, y_bounds)`.
    pub panels: Vec<(Panel, PathBuf, PathBuf, (f64, f64))>,
}

fn draw_panel<DB: DrawingBackend>(
    root: DrawingArea<DB, plotters::coord::Shift>,
    histories: &[RunHistory],
    panel: Panel,
    bounds: (f64, f64),
    with_text: bool,
) -> Result<()>
where
    DB::ErrorType: 'static,
{
    root.fill(&WHITE)?;
    let max_epoch = histories
        .iter()
        .flat_map(|h| h.records.iter().map(|r| r.epoch))
        .max()
        .unwrap_or(0) as f64;
    let x_range = -0.5..max_epoch + 0.5;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(12);
    if with_text {
        let title = match panel {
            Panel::Train => "Training accuracy",
            Panel::Val => "Validation accuracy",
        };
        builder
            .caption(title, ("sans-serif", 22))
            .x_label_area_size(36)
            .y_label_area_size(52);
    }
    let mut chart = builder.build_cartesian_2d(x_range, bounds.0..bounds.1)?;
    let mut mesh = chart.configure_mesh();
    if with_text {
        mesh.x_desc("epoch").y_desc("accuracy");
    } else {
        mesh.x_labels(0).y_labels(0);
    }
    mesh.draw()?;
    for (i, h) in histories.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let points: Vec<(f64, f64)> = h.records.iter().map(|r| (r.epoch as f64, panel.value(r))).collect();
        let series = chart.draw_series(LineSeries::new(points.clone(), color.stroke_width(2)))?;
        if with_text {
            series
                .label(h.label.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        }
        chart.draw_series(points.iter().map(|&p| Circle::new(p, 3, color.filled())))?;
    }
    if with_text {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.85))
            .border_style(BLACK)
            .position(SeriesLabelPosition::LowerRight)
            .draw()?;
    }
    root.present()?;
    Ok(())
}

/// One curve per run, separate train and validation panels, each as SVG and
/// PNG, plus `<stem>.csv` holding the plotted values.
pub fn render_curves(histories: &[RunHistory], out_dir: &Path, stem: &str) -> Result<CurveFiles> {
    if histories.is_empty() {
        bail!(cxrtl_core::Error::Validation("no histories to plot".into()));
    }
    if let Some(h) = histories.iter().find(|h| h.records.is_empty()) {
        bail!(cxrtl_core::Error::Validation(format!("history {:?} is empty", h.label)));
    }
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;

    let csv_path = out_dir.join(format!("{stem}.csv"));
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record([
        "run",
        "epoch",
        "train_accuracy",
        "val_accuracy",
        "mean_train_loss",
        "lr",
    ])?;
    for h in histories {
        for r in &h.records {
            w.write_record([
                h.label.clone(),
                r.epoch.to_string(),
                r.train_accuracy.to_string(),
                r.val_accuracy.to_string(),
                r.mean_train_loss.to_string(),
                r.lr.to_string(),
            ])?;
        }
    }
    w.flush()?;

    let with_text = fonts_available();
    let mut panels = Vec::new();
    for panel in [Panel::Train, Panel::Val] {
        let bounds = curve_bounds(histories.iter().flat_map(|h| h.records.iter().map(|r| panel.value(r))));
        let svg = out_dir.join(format!("{stem}_{}.svg", panel.name()));
        let png = out_dir.join(format!("{stem}_{}.png", panel.name()));
        draw_panel(
            SVGBackend::new(&svg, (800, 520)).into_drawing_area(),
            histories,
            panel,
            bounds,
            with_text,
        )?;
        draw_panel(
            BitMapBackend::new(&png, (800, 520)).into_drawing_area(),
            histories,
            panel,
            bounds,
            with_text,
        )?;
        panels.push((panel, svg, png, bounds));
    }
    Ok(CurveFiles { csv: csv_path, panels })
}

fn experiment_rank(id: &str) -> usize {
    match id {
        "I" => 0,
        "II" => 1,
        "III" => 2,
        "no-TL" => 3,
        _ => 4,
    }
}

fn backbone_rank(name: &str) -> usize {
    match name {
        "resnet18" => 0,
        "densenet121" => 1,
        _ => 2,
    }
}

/// Rows in table order: experiment I, II, III, no-TL, then backbone.
pub fn order_rows(rows: &[MetricsRow]) -> Vec<MetricsRow> {
    let mut out = rows.to_vec();
    out.sort_by_key(|r| (experiment_rank(&r.experiment), backbone_rank(&r.backbone)));
    out
}

pub const TABLE_COLUMNS: [&str; 10] = [
    "experiment",
    "backbone",
    "n_neurons",
    "accuracy",
    "precision_0",
    "recall_0",
    "f1_0",
    "precision_1",
    "recall_1",
    "f1_1",
];

fn cells(r: &MetricsRow) -> [String; 10] {
    let f = |v: f64| format!("{v:.4}");
    [
        r.experiment.clone(),
        r.backbone.clone(),
        r.n_neurons.map_or_else(|| "-".to_string(), |n| n.to_string()),
        f(r.accuracy),
        f(r.precision_0),
        f(r.recall_0),
        f(r.f1_0),
        f(r.precision_1),
        f(r.recall_1),
        f(r.f1_1),
    ]
}

/// `(csv, text)` renderings of the same rows, values at 4 decimals.
pub fn render_table(rows: &[MetricsRow]) -> Result<(String, String)> {
    if rows.is_empty() {
        bail!(cxrtl_core::Error::Validation("no rows to tabulate".into()));
    }
    let rows = order_rows(rows);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TABLE_COLUMNS)?;
    for r in &rows {
        w.write_record(cells(r))?;
    }
    let csv_text = String::from_utf8(w.into_inner()?)?;

    let body: Vec<[String; 10]> = rows.iter().map(cells).collect();
    let widths: Vec<usize> = (0..10)
        .map(|i| {
            body.iter()
                .map(|c| c[i].len())
                .chain([TABLE_COLUMNS[i].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |c: &[String]| {
        c.iter()
            .zip(&widths)
            .map(|(s, w)| format!("{s:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut text = String::new();
    text.push_str("class 0 = norm, class 1 = pneumonia\n");
    let header: Vec<String> = TABLE_COLUMNS.iter().map(|s| s.to_string()).collect();
    text.push_str(&line(&header));
    text.push('\n');
    for c in &body {
        text.push_str(&line(c));
        text.push('\n');
    }
    Ok((csv_text, text))
}

#[cfg(test)]
mod tests {
    use super::*;
    use cxrtl_core::train::EpochRecord;

    fn history(label: &str, vals: &[(f64, f64)]) -> RunHistory {
        let mut h = RunHistory::new(label, Some(10));
        for (e, &(t, v)) in vals.iter().enumerate() {
            h.push(EpochRecord {
                epoch: e,
                train_accuracy: t,
                val_accuracy: v,
                mean_train_loss: 0.5,
                lr: 1e-3,
                steps: 1,
            });
        }
        h
    }

    fn row(exp: &str, backbone: &str, acc: f64) -> MetricsRow {
        MetricsRow {
            experiment: exp.into(),
            backbone: backbone.into(),
            n_neurons: if exp == "III" || exp == "no-TL" { None } else { Some(10) },
            accuracy: acc,
            precision_0: 0.9,
            recall_0: 0.8125,
            f1_0: 0.85,
            precision_1: 0.886,
            recall_1: 0.979,
            f1_1: 0.931,
        }
    }

    #[test]
    fn bounds_contain_values() {
        let (lo, hi) = curve_bounds([0.62, 0.97, 0.8]);
        assert!((0.0..=0.62).contains(&lo) && (0.97..=1.0).contains(&hi));
        let (lo, hi) = curve_bounds([1.0]);
        assert!(lo <= 1.0 && hi >= 1.0 && lo < hi);
    }

    #[test]
    fn curves_for_three_runs_and_single_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let runs = [
            history("n=10", &[(0.6, 0.55), (0.8, 0.7)]),
            history("n=100", &[(0.65, 0.6), (0.9, 0.85)]),
            history("n=500", &[(0.7, 0.6), (0.95, 0.8)]),
        ];
        let files = render_curves(&runs, dir.path(), "curves").unwrap();
        for (_, svg, png, _) in &files.panels {
            assert!(svg.exists() && png.exists());
        }
        let svg = fs::read_to_string(&files.panels[0].1).unwrap();
        if fonts_available() {
            for label in ["n=10", "n=100", "n=500"] {
                assert!(svg.contains(label), "legend lacks {label}");
            }
        }
        let csv = fs::read_to_string(&files.csv).unwrap();
        assert_eq!(csv.lines().count(), 1 + 6);

        let single = [history("one", &[(0.5, 0.5)])];
        render_curves(&single, dir.path(), "single").unwrap();
        assert!(render_curves(&[], dir.path(), "none").is_err());
        assert!(render_curves(&[RunHistory::new("e", None)], dir.path(), "empty").is_err());
    }

    #[test]
    fn table_order_and_cross_parse() {
        let rows = vec![
            row("no-TL", "resnet18", 0.81),
            row("II", "densenet121", 0.9),
            row("I", "densenet121", 0.92),
            row("III", "resnet18", 0.88),
            row("I", "resnet18", 0.9125),
        ];
        let (csv_text, text) = render_table(&rows).unwrap();
        let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
        let csv_rows: Vec<Vec<String>> = reader
            .records()
            .map(|r| r.unwrap().iter().map(str::to_string).collect())
            .collect();
        let order: Vec<(&str, &str)> = csv_rows.iter().map(|r| (r[0].as_str(), r[1].as_str())).collect();
        assert_eq!(
            order,
            [
                ("I", "resnet18"),
                ("I", "densenet121"),
                ("II", "densenet121"),
                ("III", "resnet18"),
                ("no-TL", "resnet18")
            ]
        );
        let text_rows: Vec<Vec<String>> = text
            .lines()
            .skip(2)
            .map(|l| l.split_whitespace().map(str::to_string).collect())
            .collect();
        assert_eq!(text_rows, csv_rows);
        assert_eq!(csv_rows[0][3], "0.9125");

        let (one_csv, _) = render_table(&rows[..1]).unwrap();
        assert_eq!(one_csv.lines().count(), 2);
        assert!(render_table(&[]).is_err());
    }
}
