//! Weight-ratio ablation and variant comparison.

use std::path::Path;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{fmt_opt, EvalOptions};
use crate::synthdata::Dataset;
use crate::trainer::{run_jobs, run_once, summarize_runs, MeanStd, MultiRunReport};

/// Default sweep, bracketing the reference optimum of 12.
pub const DEFAULT_RATIOS: [f64; 7] = [1.0, 2.0, 4.0, 8.0, 12.0, 16.0, 24.0];

/// Published MicroSegNet result on the clinical test set; shown for context only.
pub const REFERENCE_DICE: f64 = 0.942;
pub const REFERENCE_HD95_MM: f64 = 2.11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ratio: f64,
    pub runs: usize,
    pub failed: usize,
    pub dice: Option<MeanStd>,
    pub hd95_mm: Option<MeanStd>,
    pub hard_dice: Option<MeanStd>,
}

impl AblationRow {
    pub fn complete(&self) -> bool {
        self.failed == 0
    }
}

/// Trains `runs_per_ratio` models per ratio with `w_hard = ratio`, `w_easy = 1`,
/// on `train_cfg.workers` threads.
///
/// Every ratio uses the same seeds, so ratio 1 reproduces the plain
/// deep-supervised configuration exactly.
pub fn ablate_weight_ratio(
    ratios: &[f64],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    dataset: &Dataset,
    runs_per_ratio: usize,
    eval: EvalOptions,
) -> Result<Vec<AblationRow>> {
    if ratios.is_empty() {
        return Err(Error::InvalidParam("no ratios given".into()));
    }
    if let Some(r) = ratios.iter().find(|&&r| !(r >= 1.0)) {
        return Err(Error::InvalidParam(format!("weight ratio {r} below 1")));
    }
    let configs: Vec<TrainConfig> = ratios
        .iter()
        .map(|&ratio| TrainConfig {
            w_hard: ratio,
            w_easy: 1.0,
            ..train_cfg.clone()
        })
        .collect();
    log::info!("ablation: {} ratios × {runs_per_ratio} runs", ratios.len());
    let reports = grouped_runs(&configs, model_cfg, dataset, runs_per_ratio, eval)?;
    Ok(ratios
        .iter()
        .zip(reports)
        .map(|(&ratio, rep)| {
            if rep.failed > 0 {
                log::warn!("ratio {ratio}: {} of {} runs failed", rep.failed, rep.n_runs);
            }
            AblationRow {
                ratio,
                runs: rep.n_runs,
                failed: rep.failed,
                dice: rep.dice,
                hd95_mm: rep.hd95_mm,
                hard_dice: rep.hard_dice,
            }
        })
        .collect())
}

/// `runs` seeded runs of every config, scheduled as one flat job list so the
/// worker budget spans (config, run) pairs.
fn grouped_runs(
    configs: &[TrainConfig],
    model_cfg: &ModelConfig,
    dataset: &Dataset,
    runs: usize,
    eval: EvalOptions,
) -> Result<Vec<MultiRunReport>> {
    if runs == 0 {
        return Err(Error::InvalidParam("runs must be at least 1".into()));
    }
    let jobs: Vec<TrainConfig> = configs
        .iter()
        .flat_map(|c| {
            (0..runs).map(move |r| TrainConfig {
                seed: c.seed + r as u64,
                ..c.clone()
            })
        })
        .collect();
    let workers = configs.first().map_or(1, |c| c.workers);
    let mut results = run_jobs(jobs, workers, |cfg| run_once(model_cfg, &cfg, dataset, eval)).into_iter();
    Ok(configs
        .iter()
        .map(|c| summarize_runs(c.seed, results.by_ref().take(runs).collect()))
        .collect())
}

fn ms(v: &Option<MeanStd>) -> [String; 2] {
    [fmt_opt(v.as_ref().map(|m| m.mean)), fmt_opt(v.as_ref().map(|m| m.std))]
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(csv::Writer::from_path(path)?)
}

/// `ratio, runs, failed, complete, dice_mean, dice_std, hd95_mean_mm, hd95_std_mm, hard_dice_mean, hard_dice_std`.
pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "ratio",
        "runs",
        "failed",
        "complete",
        "dice_mean",
        "dice_std",
        "hd95_mean_mm",
        "hd95_std_mm",
        "hard_dice_mean",
        "hard_dice_std",
    ])?;
    for r in rows {
        let mut rec = vec![
            format!("{}", r.ratio),
            r.runs.to_string(),
            r.failed.to_string(),
            r.complete().to_string(),
        ];
        rec.extend(ms(&r.dice));
        rec.extend(ms(&r.hd95_mm));
        rec.extend(ms(&r.hard_dice));
        w.write_record(rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One curve of a [`line_plot`]: label and `(x, y)` points.
pub type Series = (String, Vec<(f64, f64)>);

/// Renders line series to an SVG file.
pub fn line_plot(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.1.iter().copied()).collect();
    if pts.is_empty() {
        return Err(Error::InvalidParam(format!("nothing to plot for {title}")));
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let pad = |lo: f64, hi: f64| {
        let d = if hi > lo { 0.05 * (hi - lo) } else { 0.5 };
        (lo - d, hi + d)
    };
    let (x0, x1) = pad(x0, x1);
    let (y0, y1) = pad(y0, y1);
    let draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        let root = SVGBackend::new(path, (720, 440)).into_drawing_area();
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(60)
            .build_cartesian_2d(x0..x1, y0..y1)?;
        chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw()?;
        for (i, (label, points)) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))?
                .label(label.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
            chart.draw_series(points.iter().map(|&p| Circle::new(p, 3, color.filled())))?;
        }
        if series.len() > 1 {
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .draw()?;
        }
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| Error::InvalidParam(format!("rendering {}: {e}", path.display())))
}

/// Mean Dice (and hard-region Dice) against the weight ratio.
pub fn plot_ablation(rows: &[AblationRow], path: &Path) -> Result<()> {
    let curve = |f: &dyn Fn(&AblationRow) -> Option<f64>| -> Vec<(f64, f64)> {
        rows.iter().filter_map(|r| f(r).map(|v| (r.ratio, v))).collect()
    };
    line_plot(
        path,
        "Weight ratio ablation",
        "W_hard / W_easy",
        "mean Dice",
        &[
            ("dice".into(), curve(&|r| r.dice.as_ref().map(|m| m.mean))),
            ("hard-region dice".into(), curve(&|r| r.hard_dice.as_ref().map(|m| m.mean))),
        ],
    )
}

/// One training configuration in a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub deep_supervision: bool,
    pub w_hard: f64,
}

impl Variant {
    /// No deep supervision, plain BCE.
    pub fn plain() -> Self {
        Self {
            name: "plain".into(),
            deep_supervision: false,
            w_hard: 1.0,
        }
    }

    pub fn deep_supervision_only() -> Self {
        Self {
            name: "deep-supervision".into(),
            deep_supervision: true,
            w_hard: 1.0,
        }
    }

    /// Deep supervision plus AG-BCE at ratio 12.
    pub fn full() -> Self {
        Self {
            name: "microsegnet".into(),
            deep_supervision: true,
            w_hard: 12.0,
        }
    }

    pub fn standard() -> Vec<Self> {
        vec![Self::plain(), Self::deep_supervision_only(), Self::full()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub variant: Variant,
    pub report: MultiRunReport,
}

/// Trains every variant with the same `runs` seeds.
pub fn compare_variants(
    dataset: &Dataset,
    variants: &[Variant],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    runs: usize,
    eval: EvalOptions,
) -> Result<Vec<ComparisonRow>> {
    if variants.len() < 2 {
        return Err(Error::InvalidParam("need at least two variants to compare".into()));
    }
    let configs: Vec<TrainConfig> = variants
        .iter()
        .map(|v| TrainConfig {
            deep_supervision: v.deep_supervision,
            w_hard: v.w_hard,
            w_easy: 1.0,
            ..train_cfg.clone()
        })
        .collect();
    log::info!("comparison: {} variants × {runs} runs", variants.len());
    let reports = grouped_runs(&configs, model_cfg, dataset, runs, eval)?;
    Ok(variants
        .iter()
        .zip(reports)
        .map(|(v, report)| ComparisonRow {
            variant: v.clone(),
            report,
        })
        .collect())
}

/// One row per variant; the reference column is a static annotation.
pub fn write_comparison_csv(rows: &[ComparisonRow], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "variant",
        "deep_supervision",
        "w_hard",
        "runs",
        "failed",
        "dice_mean",
        "dice_std",
        "hd95_mean_mm",
        "hd95_std_mm",
        "hard_dice_mean",
        "hard_dice_std",
        "easy_dice_mean",
        "easy_dice_std",
        "reference_dice_hd95",
    ])?;
    for r in rows {
        let mut rec = vec![
            r.variant.name.clone(),
            r.variant.deep_supervision.to_string(),
            format!("{}", r.variant.w_hard),
            r.report.n_runs.to_string(),
            r.report.failed.to_string(),
        ];
        rec.extend(ms(&r.report.dice));
        rec.extend(ms(&r.report.hd95_mm));
        rec.extend(ms(&r.report.hard_dice));
        rec.extend(ms(&r.report.easy_dice));
        rec.push(format!("{REFERENCE_DICE} / {REFERENCE_HD95_MM} mm"));
        w.write_record(rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
