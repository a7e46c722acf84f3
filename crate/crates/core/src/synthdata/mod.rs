//! Synthetic micro-ultrasound-like cases, a simulated non-expert annotator,
//! and the on-disk dataset format.
//!
//! A slice is a sector ("half-doughnut") scan with a smooth star-convex gland.
//! Inside [`SynthParams::blur_sector`] the gland border is rendered with little
//! contrast and a wide ramp; calcification spots cast acoustic shadows away
//! from the probe apex. All randomness for slice `(case, slice)` derives from
//! `(seed, case, slice)`, so cases can be produced in any order.

mod annotator;
mod field;
mod io;
mod preprocess;

pub use annotator::{simulate_nonexpert, PerturbParams};
pub use field::{mix_seed, SmoothField};
pub use io::{load_dataset, write_dataset, write_hard_masks, HardFraction, ManifestSummary, MANIFEST_FORMAT};
pub use preprocess::{downsample_mask, preprocess, preprocess_record, resize_mask_nearest};

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{BinaryMask, CaseRecord, Image2D, Spacing};
use crate::error::{Error, Result};

/// Angular interval in degrees, measured counter-clockwise from the +column axis
/// with rows pointing down (so 90° is "up" in the image).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sector {
    pub start_deg: f64,
    pub end_deg: f64,
}

impl Sector {
    pub const fn new(start_deg: f64, end_deg: f64) -> Self {
        Self { start_deg, end_deg }
    }

    /// Angle of `(row, col)` about `(cr, cc)` in `[0, 360)`.
    pub fn angle_of(row: f64, col: f64, cr: f64, cc: f64) -> f64 {
        (-(row - cr)).atan2(col - cc).to_degrees().rem_euclid(360.0)
    }

    fn offset(&self, angle: f64) -> f64 {
        (angle - self.start_deg).rem_euclid(360.0)
    }

    pub fn width(&self) -> f64 {
        (self.end_deg - self.start_deg).rem_euclid(360.0)
    }

    pub fn contains(&self, angle: f64) -> bool {
        self.offset(angle) <= self.width()
    }

    /// 1 inside the sector, cosine taper to 0 over `taper_deg` beyond each edge.
    pub fn weight(&self, angle: f64, taper_deg: f64) -> f64 {
        if self.contains(angle) {
            return 1.0;
        }
        let past_end = (angle - self.end_deg).rem_euclid(360.0);
        let before_start = (self.start_deg - angle).rem_euclid(360.0);
        let d = past_end.min(before_start);
        if d >= taper_deg {
            0.0
        } else {
            0.5 * (1.0 + (PI * d / taper_deg).cos())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub num_cases: usize,
    pub slices_per_case: usize,
    pub image_size: usize,
    pub shape_irregularity: f64,
    pub artifact_density: f64,
    pub blur_sector: Sector,
    pub noise_level: f64,
    pub spacing: Spacing,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            num_cases: 40,
            slices_per_case: 6,
            image_size: 224,
            shape_irregularity: 0.5,
            artifact_density: 0.3,
            blur_sector: Sector::new(30.0, 150.0),
            noise_level: 0.5,
            spacing: Spacing::default(),
            seed: 7,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidParam(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("shape_irregularity", self.shape_irregularity)?;
        unit("artifact_density", self.artifact_density)?;
        unit("noise_level", self.noise_level)?;
        if self.num_cases == 0 || self.slices_per_case == 0 {
            return Err(Error::InvalidParam("need at least one case and one slice".into()));
        }
        if self.image_size < 32 {
            return Err(Error::InvalidParam(format!("image_size {} below 32", self.image_size)));
        }
        if !self.spacing.is_valid() {
            return Err(Error::InvalidParam("spacing must be positive".into()));
        }
        Ok(())
    }
}

pub fn case_id(case_index: usize) -> String {
    format!("case_{case_index:03}")
}

/// Probe geometry, in units of the image side.
const APEX_ROW: f64 = -0.30;
const FAN_INNER: f64 = 0.36;
const FAN_OUTER: f64 = 1.28;
const FAN_HALF_ANGLE_DEG: f64 = 42.0;

const FG_LEVEL: f64 = 0.30;
const BG_LEVEL: f64 = 0.58;
/// Border contrast left inside the blur sector.
const BLUR_CONTRAST: f64 = 0.035;
const MAX_ATTEMPTS: usize = 100;

struct Fan {
    apex_r: f64,
    apex_c: f64,
    inner: f64,
    outer: f64,
    half_angle: f64,
}

impl Fan {
    fn new(n: usize) -> Self {
        let n = n as f64;
        Self {
            apex_r: APEX_ROW * n,
            apex_c: 0.5 * n,
            inner: FAN_INNER * n,
            outer: FAN_OUTER * n,
            half_angle: FAN_HALF_ANGLE_DEG.to_radians(),
        }
    }

    /// `(radius, angle from the downward axis)` of a pixel centre.
    fn polar(&self, r: f64, c: f64) -> (f64, f64) {
        let dr = r - self.apex_r;
        let dc = c - self.apex_c;
        ((dr * dr + dc * dc).sqrt(), dc.atan2(dr))
    }

    /// Signed margin in pixels to the fan outline (positive inside).
    fn margin(&self, r: f64, c: f64) -> f64 {
        let (rho, th) = self.polar(r, c);
        let radial = (rho - self.inner).min(self.outer - rho);
        let lateral = (self.half_angle - th.abs()) * rho;
        radial.min(lateral)
    }
}

/// Star-convex gland outline `radius(φ) = base · (1 + Σ a_k cos(kφ + φ_k))`.
struct Gland {
    cr: f64,
    cc: f64,
    base: f64,
    stretch: f64,
    harmonics: Vec<(f64, f64, f64)>,
}

impl Gland {
    fn radius(&self, phi: f64) -> f64 {
        let mut s = 1.0;
        for &(k, a, ph) in &self.harmonics {
            s += a * (k * phi + ph).cos();
        }
        self.base * s
    }

    /// Radial signed distance in pixels (positive inside), plus the polar angle.
    fn level(&self, r: f64, c: f64) -> (f64, f64) {
        let dy = (r - self.cr) * self.stretch;
        let dx = c - self.cc;
        let phi = (-dy).atan2(dx);
        let rho = (dy * dy + dx * dx).sqrt();
        (self.radius(phi) - rho, phi)
    }
}

fn sample_gland(rng: &mut ChaCha8Rng, params: &SynthParams, patient: &[(f64, f64, f64)], patient_base: f64) -> Gland {
    let n = params.image_size as f64;
    let jitter = 0.06 * n;
    let irr = params.shape_irregularity;
    let harmonics = patient
        .iter()
        .map(|&(k, a, ph)| {
            let da = irr * rng.random_range(-0.015..0.015);
            let dph = rng.random_range(-0.15..0.15);
            (k, a + da, ph + dph)
        })
        .collect();
    Gland {
        cr: 0.56 * n + rng.random_range(-jitter..jitter),
        cc: 0.50 * n + rng.random_range(-jitter..jitter),
        base: patient_base * n * rng.random_range(0.93..1.07),
        stretch: rng.random_range(1.05..1.35),
        harmonics,
    }
}

fn render_mask(gland: &Gland, n: usize, spacing: Spacing) -> BinaryMask {
    BinaryMask::from_fn(n, n, spacing, |r, c| gland.level(r as f64, c as f64).0 >= 0.0)
}

fn placement_ok(mask: &BinaryMask, fan: &Fan) -> bool {
    let n = mask.height;
    let border = 3;
    for r in 0..n {
        for c in 0..n {
            if !mask.get(r, c) {
                continue;
            }
            if r < border || c < border || r + border >= n || c + border >= n {
                return false;
            }
            if fan.margin(r as f64, c as f64) < 4.0 {
                return false;
            }
        }
    }
    !mask.is_empty()
}

struct Calcification {
    r: f64,
    c: f64,
    radius: f64,
}

/// Renders one slice. The non-expert mask is left empty.
pub fn generate_slice(params: &SynthParams, case_index: usize, slice_index: usize) -> Result<CaseRecord> {
    params.validate()?;
    let n = params.image_size;
    let nf = n as f64;
    let fan = Fan::new(n);

    // patient-level anatomy shared by all slices of a case
    let mut patient_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[params.seed, case_index as u64, u64::MAX]));
    let irr = params.shape_irregularity;
    let patient_harmonics: Vec<(f64, f64, f64)> = (2..=5)
        .map(|k| {
            let amp = irr * patient_rng.random_range(0.0..0.10) / (k as f64 - 1.0).sqrt();
            (k as f64, amp, patient_rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let patient_base = patient_rng.random_range(0.16..0.23);

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[params.seed, case_index as u64, slice_index as u64]));
    let mut placed = None;
    for _ in 0..MAX_ATTEMPTS {
        let gland = sample_gland(&mut rng, params, &patient_harmonics, patient_base);
        let mask = render_mask(&gland, n, params.spacing);
        if placement_ok(&mask, &fan) {
            placed = Some((gland, mask));
            break;
        }
    }
    let (gland, mask) = placed.ok_or(Error::PlacementFailed {
        case_index,
        attempts: MAX_ATTEMPTS,
    })?;

    let noise = params.noise_level;
    let texture = SmoothField::new(&mut rng, 0.08 * nf, 48);
    let lambda = 6.0 * params.artifact_density;
    let count = if lambda > 0.0 {
        Poisson::new(lambda).expect("positive rate").sample(&mut rng) as usize
    } else {
        0
    };
    let calcs: Vec<Calcification> = (0..count)
        .map(|_| {
            let phi = rng.random_range(0.0..2.0 * PI);
            let frac = rng.random_range(0.45..0.95);
            let rho = gland.radius(phi) * frac;
            Calcification {
                r: gland.cr - rho * phi.sin() / gland.stretch,
                c: gland.cc + rho * phi.cos(),
                radius: rng.random_range(1.2..2.6) * nf / 224.0,
            }
        })
        .collect();
    let calc_polar: Vec<(f64, f64)> = calcs.iter().map(|s| fan.polar(s.r, s.c)).collect();

    let mut pixels = vec![0.0f32; n * n];
    for r in 0..n {
        for c in 0..n {
            let (rf, cf) = (r as f64, c as f64);
            if fan.margin(rf, cf) < 0.0 {
                continue;
            }
            let (s, phi) = gland.level(rf, cf);
            let blur = params.blur_sector.weight(phi.to_degrees().rem_euclid(360.0), 12.0);
            let step = (BG_LEVEL - FG_LEVEL) * (1.0 - blur) + BLUR_CONTRAST * blur;
            let ramp = 0.8 + 7.0 * blur;
            let mid = 0.5 * (FG_LEVEL + BG_LEVEL);
            let mut v = if s >= 0.0 {
                FG_LEVEL + (mid - 0.5 * step - FG_LEVEL) * (-s / ramp).exp()
            } else {
                BG_LEVEL + (mid + 0.5 * step - BG_LEVEL) * (s / ramp).exp()
            };

            let (rho, th) = fan.polar(rf, cf);
            v *= 1.0 + noise * (0.08 * texture.at(rf, cf) - 0.25 * (rho - fan.inner) / nf);

            for (spot, &(srho, sth)) in calcs.iter().zip(&calc_polar) {
                let d2 = (rf - spot.r).powi(2) + (cf - spot.c).powi(2);
                v += 0.55 * (-d2 / (2.0 * spot.radius * spot.radius)).exp();
                if rho > srho + spot.radius {
                    let lateral = (th - sth) * srho / spot.radius;
                    let fade = (-(rho - srho) / (0.6 * nf)).exp();
                    v *= 1.0 - 0.55 * fade * (-(lateral * lateral) / 2.0).exp();
                }
            }

            if noise > 0.0 {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                // unit-mean Rayleigh speckle
                let speckle = (a * a + b * b).sqrt() / (PI / 2.0).sqrt();
                let g: f64 = StandardNormal.sample(&mut rng);
                v = v * (1.0 + 0.7 * noise * (speckle - 1.0)) + 0.03 * noise * g;
            }
            pixels[r * n + c] = quantize(v);
        }
    }

    let id = case_id(case_index);
    Ok(CaseRecord {
        image: Image2D::new(n, n, pixels, params.spacing, id.clone(), slice_index)?,
        nonexpert_mask: BinaryMask::zeros(n, n, params.spacing),
        expert_mask: mask,
        hard_mask: None,
        weight_map: None,
        case_id: id,
        slice_index,
    })
}

/// Clamps to `[0, 1]` and snaps to the 8-bit grid used on disk.
fn quantize(v: f64) -> f32 {
    let q = (v.clamp(0.0, 1.0) * 255.0).round();
    q as f32 / 255.0
}

/// All slices of one patient.
pub fn generate_case(params: &SynthParams, case_index: usize) -> Result<Vec<CaseRecord>> {
    (0..params.slices_per_case)
        .map(|k| generate_slice(params, case_index, k))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One patient and its slices.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientCase {
    pub case_id: String,
    pub split: Split,
    pub spacing: Spacing,
    pub slices: Vec<CaseRecord>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub cases: Vec<PatientCase>,
    pub synth: Option<SynthParams>,
    pub annotator: Option<PerturbParams>,
}

impl Dataset {
    pub fn cases_in(&self, split: Split) -> impl Iterator<Item = &PatientCase> {
        self.cases.iter().filter(move |c| c.split == split)
    }

    pub fn records_in(&self, split: Split) -> Vec<&CaseRecord> {
        self.cases_in(split).flat_map(|c| c.slices.iter()).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.cases_in(split).count()
    }

    pub fn num_slices(&self) -> usize {
        self.cases.iter().map(|c| c.slices.len()).sum()
    }
}

/// Generates `params.num_cases` patients, annotates each slice with a simulated
/// non-expert, and assigns the last `test_cases` patients to the test split.
pub fn generate_dataset(params: &SynthParams, annotator: &PerturbParams, test_cases: usize) -> Result<Dataset> {
    params.validate()?;
    if test_cases > params.num_cases {
        return Err(Error::InvalidParam(format!(
            "{test_cases} test cases requested from {} total",
            params.num_cases
        )));
    }
    let mut cases = Vec::with_capacity(params.num_cases);
    for idx in 0..params.num_cases {
        let mut slices = generate_case(params, idx)?;
        for rec in slices.iter_mut() {
            let annot = PerturbParams {
                seed: mix_seed(&[annotator.seed, idx as u64, rec.slice_index as u64]),
                blur_sector: annotator.blur_sector.or(Some(params.blur_sector)),
                ..annotator.clone()
            };
            rec.nonexpert_mask = simulate_nonexpert(&rec.expert_mask, &annot)?;
        }
        let split = if idx >= params.num_cases - test_cases {
            Split::Test
        } else {
            Split::Train
        };
        cases.push(PatientCase {
            case_id: case_id(idx),
            split,
            spacing: params.spacing,
            slices,
        });
    }
    Ok(Dataset {
        cases,
        synth: Some(params.clone()),
        annotator: Some(annotator.clone()),
    })
}
