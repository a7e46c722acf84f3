//! Run directories, their artifact manifest, and the markdown report rendered
//! from the CSV artifacts alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::line_plot;

pub const TRAIN_LOG: &str = "train_log.csv";
pub const EPOCH_LOG: &str = "epochs.csv";
pub const SLICE_METRICS: &str = "metrics_slices.csv";
pub const PATIENT_METRICS: &str = "metrics_patients.csv";
pub const ABLATION: &str = "ablation.csv";
pub const ABLATION_PLOT: &str = "ablation.svg";
pub const COMPARISON: &str = "comparison.csv";
pub const OVERLAY_DIR: &str = "overlays";
pub const LOSS_PLOT: &str = "loss_curve.svg";
pub const REPORT: &str = "report.md";
pub const MANIFEST: &str = "artifacts.json";

/// `artifacts.json`: artifact name → path relative to the run directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ArtifactManifest {
    pub artifacts: BTreeMap<String, String>,
}

impl ArtifactManifest {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path,
            reason: e.to_string(),
        })
    }

    /// Adds `entries` to the manifest on disk.
    pub fn record(run_dir: &Path, entries: &[(&str, &Path)]) -> Result<()> {
        fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let mut m = Self::load(run_dir)?;
        for (name, path) in entries {
            let rel = path.strip_prefix(run_dir).unwrap_or(path);
            m.artifacts.insert(name.to_string(), rel.display().to_string());
        }
        let path = run_dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&m)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let headers = r.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            rows.push(rec?.iter().map(str::to_string).collect());
        }
        Ok(Self { headers, rows })
    }

    fn column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    fn markdown(&self, columns: &[&str]) -> String {
        let idx: Vec<usize> = columns.iter().filter_map(|c| self.column(c)).collect();
        let mut s = String::new();
        let names: Vec<&str> = idx.iter().map(|&i| self.headers[i].as_str()).collect();
        let _ = writeln!(s, "| {} |", names.join(" | "));
        let _ = writeln!(s, "|{}|", vec!["---"; idx.len()].join("|"));
        for row in &self.rows {
            let cells: Vec<&str> = idx.iter().map(|&i| row.get(i).map_or("", String::as_str)).collect();
            let _ = writeln!(s, "| {} |", cells.join(" | "));
        }
        s
    }

    fn series(&self, x: &str, y: &str) -> Vec<(f64, f64)> {
        let (Some(xi), Some(yi)) = (self.column(x), self.column(y)) else {
            return Vec::new();
        };
        self.rows
            .iter()
            .filter_map(|r| Some((r.get(xi)?.parse().ok()?, r.get(yi)?.parse().ok()?)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutcome {
    pub path: PathBuf,
    /// Expected artifacts that were not found.
    pub missing: Vec<String>,
}

/// Loads an artifact table, noting it as missing (or unreadable) on failure.
fn load(run_dir: &Path, name: &str, missing: &mut Vec<String>) -> Option<Table> {
    let path = run_dir.join(name);
    if !path.exists() {
        missing.push(name.to_string());
        return None;
    }
    match Table::read(&path) {
        Ok(t) => Some(t),
        Err(e) => {
            missing.push(format!("{name} (unreadable: {e})"));
            None
        }
    }
}

/// Writes `report.md` (and the plots it links) into `run_dir`.
///
/// Every number is copied verbatim from a CSV artifact; missing artifacts
/// become "no data" stubs and are listed at the end.
pub fn report(run_dir: &Path) -> Result<ReportOutcome> {
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let mut missing = Vec::new();
    let mut md = String::from("# MicroSegNet run report\n\n");

    md.push_str("## Training\n\n");
    let steps = load(run_dir, TRAIN_LOG, &mut missing);
    let epochs = load(run_dir, EPOCH_LOG, &mut missing);
    match &steps {
        Some(t) if !t.rows.is_empty() => {
            let curve = t.series("step", "loss");
            if !curve.is_empty() {
                line_plot(&run_dir.join(LOSS_PLOT), "Training loss", "step", "loss", &[("loss".into(), curve)])?;
                let _ = writeln!(md, "![training loss]({LOSS_PLOT})\n");
            }
            let _ = writeln!(md, "{} optimisation steps logged in `{TRAIN_LOG}`.\n", t.rows.len());
        }
        _ => md.push_str("_no data_\n\n"),
    }
    if let Some(t) = &epochs {
        md.push_str(&t.markdown(&["epoch", "mean_loss", "val_dice"]));
        md.push('\n');
    }

    md.push_str("## Evaluation\n\n");
    match load(run_dir, PATIENT_METRICS, &mut missing) {
        Some(t) => {
            md.push_str("Per-patient means over slices; the last row averages over patients.\n\n");
            md.push_str(&t.markdown(&["case_id", "slices", "dice", "hd95_mm", "hard_dice", "easy_dice"]));
            md.push('\n');
        }
        None => md.push_str("_no data_\n\n"),
    }

    md.push_str("## Ablation\n\n");
    match load(run_dir, ABLATION, &mut missing) {
        Some(t) => {
            let dice = t.series("ratio", "dice_mean");
            let hard = t.series("ratio", "hard_dice_mean");
            if !dice.is_empty() {
                line_plot(
                    &run_dir.join(ABLATION_PLOT),
                    "Weight ratio ablation",
                    "W_hard / W_easy",
                    "mean Dice",
                    &[("dice".into(), dice), ("hard-region dice".into(), hard)],
                )?;
                let _ = writeln!(md, "![ablation]({ABLATION_PLOT})\n");
            }
            md.push_str(&t.markdown(&[
                "ratio",
                "runs",
                "complete",
                "dice_mean",
                "dice_std",
                "hd95_mean_mm",
                "hard_dice_mean",
            ]));
            md.push('\n');
        }
        None => md.push_str("_no data_\n\n"),
    }

    md.push_str("## Comparison\n\n");
    match load(run_dir, COMPARISON, &mut missing) {
        Some(t) => {
            md.push_str(&t.markdown(&[
                "variant",
                "runs",
                "dice_mean",
                "hd95_mean_mm",
                "hard_dice_mean",
                "easy_dice_mean",
                "reference_dice_hd95",
            ]));
            md.push_str("\nThe reference column is the published clinical result, not reproducible on synthetic data.\n\n");
        }
        None => md.push_str("_no data_\n\n"),
    }

    md.push_str("## Qualitative overlays\n\n");
    let overlay_dir = run_dir.join(OVERLAY_DIR);
    let mut overlays: Vec<String> = fs::read_dir(&overlay_dir)
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .filter(|n| n.ends_with(".png"))
                .collect()
        })
        .unwrap_or_default();
    overlays.sort();
    if overlays.is_empty() {
        md.push_str("_no data_\n\n");
        missing.push(format!("{OVERLAY_DIR}/*.png"));
    } else {
        md.push_str("Green: expert contour. Red: prediction. Tinted: hard region.\n\n");
        for o in &overlays {
            let _ = writeln!(md, "![{o}]({OVERLAY_DIR}/{o})");
        }
        md.push('\n');
    }

    if !missing.is_empty() {
        md.push_str("## Missing artifacts\n\n");
        for m in &missing {
            let _ = writeln!(md, "- {m}");
        }
    }
    let path = run_dir.join(REPORT);
    fs::write(&path, md).map_err(|e| Error::io(&path, e))?;
    Ok(ReportOutcome { path, missing })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_dir_gives_stubs() {
        let dir = tempfile::tempdir().unwrap();
        let out = report(dir.path()).unwrap();
        let text = fs::read_to_string(&out.path).unwrap();
        assert!(text.matches("_no data_").count() >= 4);
        assert!(out.missing.contains(&TRAIN_LOG.to_string()));
    }

    #[test]
    fn rerun_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(TRAIN_LOG), "step,epoch,loss\n1,1,0.7\n2,1,0.5\n").unwrap();
        fs::write(dir.path().join(ABLATION), "ratio,runs,complete,dice_mean,hard_dice_mean\n1,2,true,0.9,0.5\n12,2,true,0.91,0.6\n").unwrap();
        let a = fs::read(report(dir.path()).unwrap().path).unwrap();
        let svg_a = fs::read(dir.path().join(ABLATION_PLOT)).unwrap();
        let b = fs::read(report(dir.path()).unwrap().path).unwrap();
        assert_eq!(a, b);
        assert_eq!(svg_a, fs::read(dir.path().join(ABLATION_PLOT)).unwrap());
        let text = String::from_utf8(a).unwrap();
        assert!(text.contains("| 12 | 2 | true | 0.91 |"));
    }

    #[test]
    fn manifest_accumulates() {
        let dir = tempfile::tempdir().unwrap();
        ArtifactManifest::record(dir.path(), &[("a", &dir.path().join("a.csv"))]).unwrap();
        ArtifactManifest::record(dir.path(), &[("b", Path::new("b.csv"))]).unwrap();
        let m = ArtifactManifest::load(dir.path()).unwrap();
        assert_eq!(m.artifacts.get("a").map(String::as_str), Some("a.csv"));
        assert_eq!(m.artifacts.len(), 2);
    }
}
