//! Per-slice and per-patient evaluation, CSV tables, and overlay images.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::domain::{BinaryMask, CaseRecord};
use crate::error::{Error, Result};
use crate::hard_region::compute_hard_mask;
use crate::metrics::{dice, extract_boundary, hd_percentile, region_dice, PercentileMode};
use crate::model::{probability_map, MicroSegNet};
use crate::synthdata::{preprocess_record, Dataset, Split};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub threshold: f64,
    pub mode: PercentileMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            mode: PercentileMode::Directed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub case_id: String,
    pub slice_index: usize,
    pub dice: f64,
    /// `None` when either mask is empty (no boundary to measure).
    pub hd95_mm: Option<f64>,
    pub hard_dice: f64,
    pub easy_dice: f64,
}

/// Slice metrics averaged over one patient; HD95 over the slices where it is defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientMetrics {
    pub case_id: String,
    pub slices: usize,
    pub dice: f64,
    pub hd95_mm: Option<f64>,
    pub hard_dice: f64,
    pub easy_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub options: EvalOptions,
    pub slices: Vec<SliceMetrics>,
    pub patients: Vec<PatientMetrics>,
    /// Means over patients.
    pub mean_dice: f64,
    pub mean_hd95_mm: Option<f64>,
    pub mean_hard_dice: f64,
    pub mean_easy_dice: f64,
    /// Patients with no slice where HD95 is defined.
    pub undefined_hd95: usize,
}

fn mean(v: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Thresholded P1 for a record already at the model's input size.
pub fn predict_mask(model: &MicroSegNet<f32>, record: &CaseRecord, threshold: f64) -> Result<BinaryMask> {
    let logits = model.forward_logits(&MicroSegNet::<f32>::input_tensor(&record.image), false)?;
    let p1 = probability_map(logits[0].as_ref().expect("P1"));
    Ok(p1.threshold(threshold, record.expert_mask.spacing))
}

/// Metrics of one prediction against the expert mask.
pub fn slice_metrics(record: &CaseRecord, pred: &BinaryMask, mode: PercentileMode) -> Result<SliceMetrics> {
    let g = &record.expert_mask;
    let hard = match &record.hard_mask {
        Some(h) => h.clone(),
        None => compute_hard_mask(g, &record.nonexpert_mask)?,
    };
    let hd95_mm = if g.is_empty() || pred.is_empty() {
        None
    } else {
        Some(hd_percentile(g, pred, g.spacing, 0.95, mode)?)
    };
    Ok(SliceMetrics {
        case_id: record.case_id.clone(),
        slice_index: record.slice_index,
        dice: dice(g, pred)?,
        hd95_mm,
        hard_dice: region_dice(g, pred, &hard)?,
        easy_dice: region_dice(g, pred, &hard.complement())?,
    })
}

pub fn evaluate(model: &MicroSegNet<f32>, dataset: &Dataset, split: Split, options: EvalOptions) -> Result<EvalReport> {
    let size = model.config.input_size;
    let mut slices = Vec::new();
    let mut patients = Vec::new();
    for case in dataset.cases_in(split) {
        let mut rows = Vec::with_capacity(case.slices.len());
        for rec in &case.slices {
            let rec = preprocess_record(rec, size)?;
            let pred = predict_mask(model, &rec, options.threshold)?;
            rows.push(slice_metrics(&rec, &pred, options.mode)?);
        }
        if rows.is_empty() {
            continue;
        }
        patients.push(PatientMetrics {
            case_id: case.case_id.clone(),
            slices: rows.len(),
            dice: mean(rows.iter().map(|r| r.dice)).expect("nonempty"),
            hd95_mm: mean(rows.iter().filter_map(|r| r.hd95_mm)),
            hard_dice: mean(rows.iter().map(|r| r.hard_dice)).expect("nonempty"),
            easy_dice: mean(rows.iter().map(|r| r.easy_dice)).expect("nonempty"),
        });
        slices.extend(rows);
    }
    if patients.is_empty() {
        return Err(Error::InvalidParam(format!("split {split} has no slices")));
    }
    Ok(EvalReport {
        split,
        options,
        mean_dice: mean(patients.iter().map(|p| p.dice)).expect("nonempty"),
        mean_hd95_mm: mean(patients.iter().filter_map(|p| p.hd95_mm)),
        mean_hard_dice: mean(patients.iter().map(|p| p.hard_dice)).expect("nonempty"),
        mean_easy_dice: mean(patients.iter().map(|p| p.easy_dice)).expect("nonempty"),
        undefined_hd95: patients.iter().filter(|p| p.hd95_mm.is_none()).count(),
        slices,
        patients,
    })
}

pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    csv::Writer::from_path(path).map_err(Error::from)
}

/// `case_id, slice_index, dice, hd95_mm, hard_dice, easy_dice`.
pub fn write_slice_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["case_id", "slice_index", "dice", "hd95_mm", "hard_dice", "easy_dice"])?;
    for s in &report.slices {
        w.write_record([
            s.case_id.clone(),
            s.slice_index.to_string(),
            format!("{:.6}", s.dice),
            fmt_opt(s.hd95_mm),
            format!("{:.6}", s.hard_dice),
            format!("{:.6}", s.easy_dice),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row per patient plus a final `mean` row.
pub fn write_patient_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["case_id", "slices", "dice", "hd95_mm", "hard_dice", "easy_dice"])?;
    for p in &report.patients {
        w.write_record([
            p.case_id.clone(),
            p.slices.to_string(),
            format!("{:.6}", p.dice),
            fmt_opt(p.hd95_mm),
            format!("{:.6}", p.hard_dice),
            format!("{:.6}", p.easy_dice),
        ])?;
    }
    w.write_record([
        "mean".to_string(),
        report.slices.len().to_string(),
        format!("{:.6}", report.mean_dice),
        fmt_opt(report.mean_hd95_mm),
        format!("{:.6}", report.mean_hard_dice),
        format!("{:.6}", report.mean_easy_dice),
    ])?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Grayscale image with the hard region tinted, the expert contour in green
/// and the predicted contour in red.
pub fn render_overlay(record: &CaseRecord, pred: &BinaryMask) -> Result<RgbImage> {
    let (h, w) = record.shape();
    if pred.shape() != (h, w) {
        return Err(Error::shape("overlay prediction", (h, w), pred.shape()));
    }
    let hard = compute_hard_mask(&record.expert_mask, &record.nonexpert_mask)?;
    let mut img = RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let g = (f64::from(record.image.get(r, c)).clamp(0.0, 1.0) * 255.0).round() as u8;
            let px = if hard.get(r, c) {
                Rgb([g / 2 + 110, g / 2 + 70, g / 4])
            } else {
                Rgb([g, g, g])
            };
            img.put_pixel(c as u32, r as u32, px);
        }
    }
    for (r, c) in extract_boundary(&record.expert_mask) {
        img.put_pixel(c as u32, r as u32, Rgb([40, 220, 60]));
    }
    for (r, c) in extract_boundary(pred) {
        img.put_pixel(c as u32, r as u32, Rgb([235, 40, 40]));
    }
    Ok(img)
}

/// Writes overlays for the first `limit` slices of `split` as `overlay_{case}_{k}.png`.
pub fn write_overlays(
    model: &MicroSegNet<f32>,
    dataset: &Dataset,
    split: Split,
    threshold: f64,
    limit: usize,
    dir: &Path,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for rec in dataset.records_in(split).into_iter().take(limit) {
        let rec = preprocess_record(rec, model.config.input_size)?;
        let pred = predict_mask(model, &rec, threshold)?;
        let path = dir.join(format!("overlay_{}_{}.png", rec.case_id, rec.slice_index));
        render_overlay(&rec, &pred)?
            .save(&path)
            .map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?;
        out.push(path);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Spacing;
    use crate::synthdata::{generate_slice, SynthParams};

    #[test]
    fn perfect_prediction_scores_one() {
        let p = SynthParams {
            image_size: 64,
            ..SynthParams::default()
        };
        let mut rec = generate_slice(&p, 0, 0).unwrap();
        rec.nonexpert_mask = rec.expert_mask.clone();
        let m = slice_metrics(&rec, &rec.expert_mask.clone(), PercentileMode::Directed).unwrap();
        assert_eq!((m.dice, m.hd95_mm, m.hard_dice, m.easy_dice), (1.0, Some(0.0), 1.0, 1.0));
        let empty = BinaryMask::zeros(64, 64, Spacing::default());
        let m = slice_metrics(&rec, &empty, PercentileMode::Directed).unwrap();
        assert_eq!((m.dice, m.hd95_mm), (0.0, None));
    }

    #[test]
    fn overlay_marks_contours() {
        let p = SynthParams {
            image_size: 48,
            ..SynthParams::default()
        };
        let rec = generate_slice(&p, 1, 0).unwrap();
        let img = render_overlay(&rec, &rec.expert_mask).unwrap();
        let (r, c) = extract_boundary(&rec.expert_mask)[0];
        assert_eq!(img.get_pixel(c as u32, r as u32), &Rgb([235, 40, 40]));
    }
}
