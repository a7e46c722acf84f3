//! Value types shared by every stage of the pipeline.
//!
//! All grids are row-major `height × width`. Types are plain data with public
//! fields; constructors check invariants, and [`validate_case`] re-checks a
//! whole [`CaseRecord`] without panicking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical pixel size in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub row: f64,
    pub col: f64,
}

impl Spacing {
    pub const fn new(row: f64, col: f64) -> Self {
        Self { row, col }
    }

    pub fn scaled(self, row_factor: f64, col_factor: f64) -> Self {
        Self {
            row: self.row * row_factor,
            col: self.col * col_factor,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.row > 0.0 && self.col > 0.0 && self.row.is_finite() && self.col.is_finite()
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Self::new(0.1, 0.1)
    }
}

/// Single-channel grayscale slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub spacing: Spacing,
    pub case_id: String,
    pub slice_index: usize,
}

impl Image2D {
    pub fn new(
        height: usize,
        width: usize,
        pixels: Vec<f32>,
        spacing: Spacing,
        case_id: impl Into<String>,
        slice_index: usize,
    ) -> Result<Self> {
        if height < 8 || width < 8 {
            return Err(Error::InvalidParam(format!(
                "image must be at least 8x8, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::shape("image pixels", (height, width), (pixels.len(), 1)));
        }
        if !spacing.is_valid() {
            return Err(Error::InvalidParam(format!("non-positive spacing {spacing:?}")));
        }
        Ok(Self {
            height,
            width,
            pixels,
            spacing,
            case_id: case_id.into(),
            slice_index,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.pixels[r * self.width + c]
    }
}

/// Per-pixel `{0, 1}` labels.
///
/// Labels are stored as raw bytes so that data read from disk can carry
/// non-binary values until [`validate_case`] rejects them.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
    pub spacing: Spacing,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>, spacing: Spacing) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape("mask labels", (height, width), (labels.len(), 1)));
        }
        if let Some(i) = labels.iter().position(|&v| v > 1) {
            return Err(Error::InvalidParam(format!(
                "labels not binary at ({}, {})",
                i / width,
                i % width
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
            spacing,
        })
    }

    pub fn zeros(height: usize, width: usize, spacing: Spacing) -> Self {
        Self {
            height,
            width,
            labels: vec![0; height * width],
            spacing,
        }
    }

    pub fn ones(height: usize, width: usize, spacing: Spacing) -> Self {
        Self {
            height,
            width,
            labels: vec![1; height * width],
            spacing,
        }
    }

    /// Builds a mask from a predicate over `(row, col)`.
    pub fn from_fn(height: usize, width: usize, spacing: Spacing, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut labels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                labels.push(u8::from(f(r, c)));
            }
        }
        Self {
            height,
            width,
            labels,
            spacing,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.labels[r * self.width + c] == 1
    }

    pub fn count(&self) -> usize {
        self.labels.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn area_fraction(&self) -> f64 {
        self.count() as f64 / (self.height * self.width) as f64
    }

    pub fn complement(&self) -> Self {
        Self {
            labels: self.labels.iter().map(|&v| 1 - v.min(1)).collect(),
            ..self.clone()
        }
    }

    pub fn is_binary(&self) -> bool {
        self.labels.iter().all(|&v| v <= 1)
    }
}

/// Clamp applied to probabilities before any logarithm.
pub const PROB_EPS: f64 = 1e-7;

/// Per-pixel foreground probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub height: usize,
    pub width: usize,
    pub probs: Vec<f64>,
}

impl ProbabilityMap {
    /// Wraps raw values, clamping them into `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn new(height: usize, width: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != height * width {
            return Err(Error::shape("probability map", (height, width), (probs.len(), 1)));
        }
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidParam("non-finite probability".into()));
        }
        Ok(Self {
            height,
            width,
            probs: probs.into_iter().map(clamp_prob).collect(),
        })
    }

    pub fn uniform(height: usize, width: usize, p: f64) -> Self {
        Self {
            height,
            width,
            probs: vec![clamp_prob(p); height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn threshold(&self, t: f64, spacing: Spacing) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            labels: self.probs.iter().map(|&p| u8::from(p > t)).collect(),
            spacing,
        }
    }
}

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Two-valued per-pixel loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    pub height: usize,
    pub width: usize,
    pub weights: Vec<f64>,
}

impl WeightMap {
    pub fn new(height: usize, width: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != height * width {
            return Err(Error::shape("weight map", (height, width), (weights.len(), 1)));
        }
        if let Some(w) = weights.iter().find(|&&w| !(w >= 1.0) || !w.is_finite()) {
            return Err(Error::InvalidParam(format!("weight {w} below 1")));
        }
        Ok(Self { height, width, weights })
    }

    pub fn uniform(height: usize, width: usize, w: f64) -> Self {
        Self {
            height,
            width,
            weights: vec![w; height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Distinct weight values in ascending order.
    pub fn levels(&self) -> Vec<f64> {
        let mut v: Vec<f64> = Vec::new();
        for &w in &self.weights {
            if !v.contains(&w) {
                v.push(w);
            }
        }
        v.sort_by(|a, b| a.partial_cmp(b).expect("weights are finite"));
        v
    }
}

/// Outputs of the four supervision heads: full, 1/2, 1/4, 1/8 side length.
///
/// The coarse maps are `None` when the model ran without deep supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScalePrediction {
    pub p1: ProbabilityMap,
    pub p2: Option<ProbabilityMap>,
    pub p3: Option<ProbabilityMap>,
    pub p4: Option<ProbabilityMap>,
}

impl MultiScalePrediction {
    /// Checks the 1 : 1/2 : 1/4 : 1/8 side-length ratio.
    pub fn check_scales(&self) -> Result<()> {
        let (h, w) = self.p1.shape();
        for (k, p) in [(2, &self.p2), (4, &self.p3), (8, &self.p4)] {
            if let Some(p) = p {
                if h % k != 0 || w % k != 0 || p.shape() != (h / k, w / k) {
                    return Err(Error::shape(format!("prediction at 1/{k}"), (h / k, w / k), p.shape()));
                }
            }
        }
        Ok(())
    }

    pub fn has_deep_supervision(&self) -> bool {
        self.p2.is_some() && self.p3.is_some() && self.p4.is_some()
    }
}

/// One annotated slice of one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub image: Image2D,
    pub expert_mask: BinaryMask,
    pub nonexpert_mask: BinaryMask,
    pub hard_mask: Option<BinaryMask>,
    pub weight_map: Option<WeightMap>,
    pub case_id: String,
    pub slice_index: usize,
}

impl CaseRecord {
    pub fn shape(&self) -> (usize, usize) {
        self.image.shape()
    }
}

/// Lists every broken invariant of `record`; empty iff the record is well formed.
pub fn validate_case(record: &CaseRecord) -> Vec<String> {
    let mut out = Vec::new();
    let img = &record.image;
    let shape = img.shape();
    if img.height < 8 || img.width < 8 {
        out.push(format!("image: size {}x{} below 8x8", img.height, img.width));
    }
    if img.pixels.len() != img.height * img.width {
        out.push(format!(
            "image: {} pixels for declared {}x{}",
            img.pixels.len(),
            img.height,
            img.width
        ));
    }
    if !img.spacing.is_valid() {
        out.push(format!("image: spacing {:?} not strictly positive", img.spacing));
    }
    if let Some(v) = img.pixels.iter().find(|v| !v.is_finite()) {
        out.push(format!("image: non-finite intensity {v}"));
    }
    if img.case_id != record.case_id || img.slice_index != record.slice_index {
        out.push("image: identifiers disagree with record".to_string());
    }

    let mut check_mask = |name: &str, m: &BinaryMask| {
        if m.shape() != shape || m.labels.len() != m.height * m.width {
            out.push(format!(
                "{name}: shape mismatch ({}x{} vs image {}x{})",
                m.height, m.width, shape.0, shape.1
            ));
            return;
        }
        if let Some(i) = m.labels.iter().position(|&v| v > 1) {
            out.push(format!("{name}: labels not binary at ({}, {})", i / m.width, i % m.width));
        }
        if !m.spacing.is_valid() {
            out.push(format!("{name}: spacing {:?} not strictly positive", m.spacing));
        }
    };
    check_mask("expert_mask", &record.expert_mask);
    check_mask("nonexpert_mask", &record.nonexpert_mask);
    if let Some(h) = &record.hard_mask {
        check_mask("hard_mask", h);
    }

    if let Some(h) = &record.hard_mask {
        if h.shape() == shape && record.expert_mask.shape() == shape && record.nonexpert_mask.shape() == shape {
            let xor_ok = h
                .labels
                .iter()
                .zip(&record.expert_mask.labels)
                .zip(&record.nonexpert_mask.labels)
                .all(|((&hv, &e), &n)| hv == u8::from(e != n));
            if !xor_ok {
                out.push("hard_mask: not the expert/non-expert disagreement".to_string());
            }
        }
    }
    if let Some(w) = &record.weight_map {
        if w.shape() != shape || w.weights.len() != w.height * w.width {
            out.push(format!("weight_map: shape mismatch ({}x{})", w.height, w.width));
        } else {
            if w.weights.iter().any(|&v| !(v >= 1.0)) {
                out.push("weight_map: weight below 1".to_string());
            }
            if w.levels().len() > 2 {
                out.push("weight_map: more than two weight levels".to_string());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_record(n: usize) -> CaseRecord {
        let sp = Spacing::default();
        let image = Image2D::new(n, n, vec![0.5; n * n], sp, "c0", 0).unwrap();
        let expert = BinaryMask::from_fn(n, n, sp, |r, c| r > 2 && c > 2 && r < n - 2 && c < n - 2);
        CaseRecord {
            image,
            nonexpert_mask: expert.clone(),
            expert_mask: expert,
            hard_mask: None,
            weight_map: None,
            case_id: "c0".into(),
            slice_index: 0,
        }
    }

    #[test]
    fn well_formed_record_has_no_violations() {
        assert!(validate_case(&tiny_record(16)).is_empty());
    }

    #[test]
    fn non_binary_label_is_reported_with_position() {
        let mut rec = tiny_record(16);
        rec.expert_mask.labels[16 * 3 + 5] = 128;
        let v = validate_case(&rec);
        assert_eq!(v, vec!["expert_mask: labels not binary at (3, 5)".to_string()]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut rec = tiny_record(16);
        rec.expert_mask = BinaryMask::zeros(32, 32, Spacing::default());
        let v = validate_case(&rec);
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("shape mismatch"), "{v:?}");
    }

    #[test]
    fn validation_is_deterministic() {
        let mut rec = tiny_record(16);
        rec.image.spacing = Spacing::new(0.0, 0.1);
        rec.nonexpert_mask.labels[0] = 7;
        assert_eq!(validate_case(&rec), validate_case(&rec));
        assert_eq!(validate_case(&rec).len(), 2);
    }

    #[test]
    fn bad_hard_mask_and_weight_map_are_caught() {
        let mut rec = tiny_record(16);
        rec.hard_mask = Some(BinaryMask::ones(16, 16, Spacing::default()));
        let mut w = WeightMap::uniform(16, 16, 1.0);
        w.weights[0] = 0.5;
        w.weights[1] = 3.0;
        w.weights[2] = 12.0;
        rec.weight_map = Some(w);
        let v = validate_case(&rec);
        assert!(v.iter().any(|s| s.contains("disagreement")));
        assert!(v.iter().any(|s| s.contains("below 1")));
        assert!(v.iter().any(|s| s.contains("two weight levels")));
    }

    #[test]
    fn probability_map_clamps() {
        let p = ProbabilityMap::new(1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(p.probs, vec![PROB_EPS, 0.5, 1.0 - PROB_EPS]);
    }

    #[test]
    fn scale_check_rejects_wrong_ratio() {
        let pred = MultiScalePrediction {
            p1: ProbabilityMap::uniform(16, 16, 0.5),
            p2: Some(ProbabilityMap::uniform(8, 8, 0.5)),
            p3: Some(ProbabilityMap::uniform(5, 5, 0.5)),
            p4: Some(ProbabilityMap::uniform(2, 2, 0.5)),
        };
        assert!(pred.check_scales().is_err());
    }

    #[test]
    fn constructors_reject_invalid_input() {
        let sp = Spacing::default();
        assert!(Image2D::new(4, 8, vec![0.0; 32], sp, "x", 0).is_err());
        assert!(BinaryMask::new(2, 2, vec![0, 1, 2, 0], sp).is_err());
        assert!(WeightMap::new(1, 2, vec![1.0, 0.9]).is_err());
    }
}
