use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::field::SmoothField;
use super::Sector;
use crate::domain::{BinaryMask, Spacing};
use crate::error::{Error, Result};
use crate::metrics::squared_distance_transform;

/// Controls how far a simulated non-expert strays from the expert outline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbParams {
    /// Standard deviation of the normal displacement, in pixels.
    pub amplitude_px: f64,
    pub correlation_len_px: f64,
    /// Displacement multiplier inside `blur_sector`.
    pub hard_sector_gain: f64,
    /// Measured about the expert mask centroid; `None` disables the gain.
    pub blur_sector: Option<Sector>,
    pub seed: u64,
}

impl Default for PerturbParams {
    fn default() -> Self {
        Self {
            amplitude_px: 2.0,
            correlation_len_px: 18.0,
            hard_sector_gain: 3.0,
            blur_sector: Some(Sector::new(30.0, 150.0)),
            seed: 11,
        }
    }
}

impl PerturbParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude_px >= 0.0) {
            return Err(Error::InvalidParam(format!("amplitude_px {} < 0", self.amplitude_px)));
        }
        if !(self.correlation_len_px > 0.0) {
            return Err(Error::InvalidParam(format!(
                "correlation_len_px {} must be > 0",
                self.correlation_len_px
            )));
        }
        if !(self.hard_sector_gain >= 1.0) {
            return Err(Error::InvalidParam(format!(
                "hard_sector_gain {} must be >= 1",
                self.hard_sector_gain
            )));
        }
        Ok(())
    }
}

/// Signed distance in pixels to the mask outline, positive inside.
///
/// The zero level sits half a pixel outside the outermost foreground centres.
pub fn signed_distance(mask: &BinaryMask) -> Vec<f64> {
    let (h, w) = mask.shape();
    let unit = Spacing::new(1.0, 1.0);
    let fg: Vec<(usize, usize)> = (0..h * w).filter(|&i| mask.labels[i] == 1).map(|i| (i / w, i % w)).collect();
    let bg: Vec<(usize, usize)> = (0..h * w).filter(|&i| mask.labels[i] != 1).map(|i| (i / w, i % w)).collect();
    let to_fg = squared_distance_transform(h, w, &fg, unit);
    let to_bg = squared_distance_transform(h, w, &bg, unit);
    (0..h * w)
        .map(|i| {
            if mask.labels[i] == 1 {
                // image edge counts as outside
                let (r, c) = (i / w, i % w);
                let edge = (r.min(c).min(h - 1 - r).min(w - 1 - c) + 1) as f64;
                to_bg[i].sqrt().min(edge) - 0.5
            } else {
                0.5 - to_fg[i].sqrt()
            }
        })
        .collect()
}

/// Displaces the expert outline along its normal by a smooth random field and
/// re-thresholds, yielding a plausible but imperfect second annotation.
pub fn simulate_nonexpert(expert: &BinaryMask, params: &PerturbParams) -> Result<BinaryMask> {
    params.validate()?;
    if expert.is_empty() {
        return Err(Error::InvalidParam("expert mask is empty".into()));
    }
    if params.amplitude_px == 0.0 {
        return Ok(expert.clone());
    }
    let (h, w) = expert.shape();
    let sdf = signed_distance(expert);
    let (mut sr, mut sc, mut n) = (0.0, 0.0, 0.0);
    for i in 0..h * w {
        if expert.labels[i] == 1 {
            sr += (i / w) as f64;
            sc += (i % w) as f64;
            n += 1.0;
        }
    }
    let (cr, cc) = (sr / n, sc / n);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let field = SmoothField::new(&mut rng, params.correlation_len_px, 64);
    let mut out = BinaryMask::zeros(h, w, expert.spacing);
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let gain = match params.blur_sector {
                Some(sector) => {
                    let angle = Sector::angle_of(r as f64, c as f64, cr, cc);
                    1.0 + (params.hard_sector_gain - 1.0) * sector.weight(angle, 10.0)
                }
                None => 1.0,
            };
            let shift = params.amplitude_px * gain * field.at(r as f64, c as f64);
            out.labels[i] = u8::from(sdf[i] + shift > 0.0);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dice;

    fn disk(n: usize, radius: f64) -> BinaryMask {
        let c = n as f64 / 2.0;
        BinaryMask::from_fn(n, n, Spacing::default(), |r, cc| {
            (r as f64 - c).powi(2) + (cc as f64 - c).powi(2) <= radius * radius
        })
    }

    #[test]
    fn zero_amplitude_is_identity() {
        let e = disk(48, 14.0);
        let p = PerturbParams {
            amplitude_px: 0.0,
            ..PerturbParams::default()
        };
        assert_eq!(simulate_nonexpert(&e, &p).unwrap(), e);
    }

    #[test]
    fn tiny_amplitude_keeps_mask() {
        let e = disk(48, 14.0);
        let p = PerturbParams {
            amplitude_px: 1e-6,
            ..PerturbParams::default()
        };
        assert_eq!(simulate_nonexpert(&e, &p).unwrap(), e);
    }

    #[test]
    fn deterministic_and_rejects_empty() {
        let e = disk(48, 14.0);
        let p = PerturbParams::default();
        assert_eq!(simulate_nonexpert(&e, &p).unwrap(), simulate_nonexpert(&e, &p).unwrap());
        assert!(simulate_nonexpert(&BinaryMask::zeros(8, 8, Spacing::default()), &p).is_err());
    }

    #[test]
    fn signed_distance_sign_matches_mask() {
        let e = disk(32, 9.0);
        let s = signed_distance(&e);
        for (i, &v) in s.iter().enumerate() {
            assert_eq!(v > 0.0, e.labels[i] == 1);
        }
    }

    #[test]
    fn dice_shrinks_with_amplitude() {
        let e = disk(64, 20.0);
        let mean_dice = |amp: f64| {
            (0..20)
                .map(|s| {
                    let p = PerturbParams {
                        amplitude_px: amp,
                        seed: s,
                        ..PerturbParams::default()
                    };
                    dice(&e, &simulate_nonexpert(&e, &p).unwrap()).unwrap()
                })
                .sum::<f64>()
                / 20.0
        };
        let d: Vec<f64> = [0.5, 1.5, 3.0, 5.0].iter().map(|&a| mean_dice(a)).collect();
        assert!(d.windows(2).all(|w| w[0] > w[1]), "{d:?}");
        assert!(d.iter().all(|&v| v > 0.0 && v <= 1.0));
    }
}
