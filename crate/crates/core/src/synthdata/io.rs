//! Directory layout:
//!
//! ```text
//! root/manifest.json
//! root/{case_id}/slice_{k}_img.png
//! root/{case_id}/slice_{k}_expert.png
//! root/{case_id}/slice_{k}_nonexpert.png
//! root/{case_id}/slice_{k}_hard.png      (optional, written by `hard-mask`)
//! ```
//!
//! Images are 8-bit grayscale; masks store 0 / 255.

use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;
use serde::{Deserialize, Serialize};

use super::{Dataset, PatientCase, PerturbParams, Split, SynthParams};
use crate::domain::{validate_case, BinaryMask, CaseRecord, Image2D, Spacing};
use crate::error::{Error, Result};
use crate::hard_region::{compute_hard_mask, dilate};

pub const MANIFEST_FORMAT: &str = "microsegnet-dataset-v1";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    #[serde(default)]
    synth: Option<SynthParams>,
    #[serde(default)]
    annotator: Option<PerturbParams>,
    cases: Vec<ManifestCase>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestCase {
    case_id: String,
    split: Split,
    spacing: Spacing,
    slices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ManifestSummary {
    pub root: PathBuf,
    pub train_cases: usize,
    pub val_cases: usize,
    pub test_cases: usize,
    pub slices: usize,
}

fn slice_path(root: &Path, case_id: &str, k: usize, kind: &str) -> PathBuf {
    root.join(case_id).join(format!("slice_{k}_{kind}.png"))
}

fn save_gray(path: &Path, w: usize, h: usize, bytes: Vec<u8>) -> Result<()> {
    let img = GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer sized to image");
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn load_gray(path: &Path, case_id: &str) -> Result<GrayImage> {
    if !path.exists() {
        return Err(Error::Dataset {
            case_id: case_id.to_string(),
            reason: format!("missing file {}", path.display()),
        });
    }
    Ok(image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8())
}

fn mask_bytes(m: &BinaryMask) -> Vec<u8> {
    m.labels.iter().map(|&v| if v == 1 { 255 } else { 0 }).collect()
}

fn decode_mask(img: &GrayImage, spacing: Spacing) -> BinaryMask {
    BinaryMask {
        height: img.height() as usize,
        width: img.width() as usize,
        // anything that is not 0 or 255 stays visibly non-binary
        labels: img
            .as_raw()
            .iter()
            .map(|&v| match v {
                0 => 0,
                255 => 1,
                _ => 2,
            })
            .collect(),
        spacing,
    }
}

fn write_record(root: &Path, rec: &CaseRecord) -> Result<()> {
    let (h, w) = rec.shape();
    let px: Vec<u8> = rec
        .image
        .pixels
        .iter()
        .map(|&v| (f64::from(v).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let k = rec.slice_index;
    save_gray(&slice_path(root, &rec.case_id, k, "img"), w, h, px)?;
    save_gray(&slice_path(root, &rec.case_id, k, "expert"), w, h, mask_bytes(&rec.expert_mask))?;
    save_gray(&slice_path(root, &rec.case_id, k, "nonexpert"), w, h, mask_bytes(&rec.nonexpert_mask))?;
    if let Some(hard) = &rec.hard_mask {
        save_gray(&slice_path(root, &rec.case_id, k, "hard"), w, h, mask_bytes(hard))?;
    }
    Ok(())
}

/// Writes every slice plus `manifest.json` under `root` (created if needed).
pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<ManifestSummary> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut cases = Vec::with_capacity(dataset.cases.len());
    for case in &dataset.cases {
        let dir = root.join(&case.case_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for rec in &case.slices {
            write_record(root, rec)?;
        }
        cases.push(ManifestCase {
            case_id: case.case_id.clone(),
            split: case.split,
            spacing: case.spacing,
            slices: case.slices.iter().map(|r| r.slice_index).collect(),
        });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        synth: dataset.synth.clone(),
        annotator: dataset.annotator.clone(),
        cases,
    };
    let path = root.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(summarize(root, dataset))
}

fn summarize(root: &Path, dataset: &Dataset) -> ManifestSummary {
    ManifestSummary {
        root: root.to_path_buf(),
        train_cases: dataset.count(Split::Train),
        val_cases: dataset.count(Split::Val),
        test_cases: dataset.count(Split::Test),
        slices: dataset.num_slices(),
    }
}

fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Manifest {
            path,
            reason: format!("unknown format {:?}", manifest.format),
        });
    }
    Ok(manifest)
}

/// Loads and validates a dataset written by [`write_dataset`].
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    let mut cases = Vec::with_capacity(manifest.cases.len());
    for mc in &manifest.cases {
        let id = &mc.case_id;
        let mut slices = Vec::with_capacity(mc.slices.len());
        for &k in &mc.slices {
            let img = load_gray(&slice_path(root, id, k, "img"), id)?;
            let expert = load_gray(&slice_path(root, id, k, "expert"), id)?;
            let nonexpert = load_gray(&slice_path(root, id, k, "nonexpert"), id)?;
            let hard_path = slice_path(root, id, k, "hard");
            let hard = if hard_path.exists() {
                Some(load_gray(&hard_path, id)?)
            } else {
                None
            };
            let dims = img.dimensions();
            for (name, m) in [("expert", Some(&expert)), ("nonexpert", Some(&nonexpert)), ("hard", hard.as_ref())] {
                if let Some(m) = m {
                    if m.dimensions() != dims {
                        return Err(Error::Dataset {
                            case_id: id.clone(),
                            reason: format!(
                                "slice {k}: {name} mask {:?} does not match image {:?}",
                                m.dimensions(),
                                dims
                            ),
                        });
                    }
                }
            }
            let (w, h) = (dims.0 as usize, dims.1 as usize);
            let pixels = img.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect();
            let image = Image2D::new(h, w, pixels, mc.spacing, id.clone(), k).map_err(|e| Error::Dataset {
                case_id: id.clone(),
                reason: format!("slice {k}: {e}"),
            })?;
            let rec = CaseRecord {
                image,
                expert_mask: decode_mask(&expert, mc.spacing),
                nonexpert_mask: decode_mask(&nonexpert, mc.spacing),
                hard_mask: hard.map(|m| decode_mask(&m, mc.spacing)),
                weight_map: None,
                case_id: id.clone(),
                slice_index: k,
            };
            let violations = validate_case(&rec);
            if !violations.is_empty() {
                return Err(Error::Dataset {
                    case_id: id.clone(),
                    reason: format!("slice {k}: {}", violations.join("; ")),
                });
            }
            slices.push(rec);
        }
        cases.push(PatientCase {
            case_id: id.clone(),
            split: mc.split,
            spacing: mc.spacing,
            slices,
        });
    }
    Ok(Dataset {
        cases,
        synth: manifest.synth,
        annotator: manifest.annotator,
    })
}

/// Hard-area fraction of one slice, as reported by [`write_hard_masks`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HardFraction {
    pub case_id: String,
    pub slice_index: usize,
    pub hard_fraction: f64,
}

/// Computes and writes `slice_{k}_hard.png` for every slice of the dataset at `root`,
/// returning the per-slice hard-area fractions.
pub fn write_hard_masks(root: &Path, dilate_px: usize) -> Result<Vec<HardFraction>> {
    let manifest = read_manifest(root)?;
    let dataset = load_dataset(root)?;
    let mut out = Vec::new();
    for case in &dataset.cases {
        for rec in &case.slices {
            let hard = dilate(&compute_hard_mask(&rec.expert_mask, &rec.nonexpert_mask)?, dilate_px);
            let (h, w) = hard.shape();
            save_gray(&slice_path(root, &rec.case_id, rec.slice_index, "hard"), w, h, mask_bytes(&hard))?;
            out.push(HardFraction {
                case_id: rec.case_id.clone(),
                slice_index: rec.slice_index,
                hard_fraction: hard.area_fraction(),
            });
        }
    }
    debug_assert_eq!(manifest.cases.len(), dataset.cases.len());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate_dataset;

    fn tiny() -> Dataset {
        let p = SynthParams {
            num_cases: 5,
            slices_per_case: 1,
            image_size: 40,
            ..SynthParams::default()
        };
        generate_dataset(&p, &PerturbParams::default(), 2).unwrap()
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        let summary = write_dataset(&ds, dir.path()).unwrap();
        assert_eq!((summary.train_cases, summary.test_cases, summary.slices), (3, 2, 5));
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn missing_mask_names_the_case() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&tiny(), dir.path()).unwrap();
        fs::remove_file(slice_path(dir.path(), "case_003", 0, "expert")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("case_003"), "{err}");
    }

    #[test]
    fn corrupt_manifest_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&tiny(), dir.path()).unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "{ not json").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Manifest { .. })));
    }

    #[test]
    fn shape_mismatch_names_the_case() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&tiny(), dir.path()).unwrap();
        save_gray(&slice_path(dir.path(), "case_001", 0, "nonexpert"), 8, 8, vec![0; 64]).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("case_001") && msg.contains("nonexpert"), "{msg}");
    }

    #[test]
    fn hard_masks_are_written_and_reloaded() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&tiny(), dir.path()).unwrap();
        let fr = write_hard_masks(dir.path(), 0).unwrap();
        assert_eq!(fr.len(), 5);
        assert!(fr.iter().all(|f| f.hard_fraction > 0.0 && f.hard_fraction < 0.5));
        let back = load_dataset(dir.path()).unwrap();
        assert!(back.cases.iter().all(|c| c.slices.iter().all(|s| s.hard_mask.is_some())));
    }
}
