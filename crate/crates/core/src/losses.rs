//! Binary cross entropy, its annotation-weighted variant, and the four-scale
//! deep-supervision objective.
//!
//! All sums run in `f64` in row-major order. [`bce`] and [`ag_bce`] share one
//! kernel, so a unit weight map reproduces plain BCE bit for bit.

use crate::domain::{clamp_prob, BinaryMask, MultiScalePrediction, ProbabilityMap, WeightMap};
use crate::error::{Error, Result};

/// Coefficients of the P1..P4 terms, finest scale first.
pub const SCALE_COEFFICIENTS: [f64; 4] = [1.0, 0.5, 0.25, 0.125];

fn check_shape(context: &str, p: (usize, usize), other: (usize, usize)) -> Result<()> {
    if p != other {
        return Err(Error::shape(context, p, other));
    }
    Ok(())
}

#[inline]
fn log_likelihood(p: f64, y: u8) -> f64 {
    let p = clamp_prob(p);
    if y == 1 {
        p.ln()
    } else {
        (1.0 - p).ln()
    }
}

/// `-(1/K) Σ w_i [y_i ln p_i + (1 - y_i) ln(1 - p_i)]`, with `w ≡ 1` when `weights` is `None`.
fn weighted_sum(p: &ProbabilityMap, y: &BinaryMask, weights: Option<&[f64]>) -> f64 {
    let k = p.probs.len() as f64;
    let mut acc = 0.0f64;
    match weights {
        None => {
            for (&pi, &yi) in p.probs.iter().zip(&y.labels) {
                acc += log_likelihood(pi, yi);
            }
        }
        Some(w) => {
            for ((&pi, &yi), &wi) in p.probs.iter().zip(&y.labels).zip(w) {
                acc += wi * log_likelihood(pi, yi);
            }
        }
    }
    -acc / k
}

/// Mean binary cross entropy over all pixels.
pub fn bce(p: &ProbabilityMap, y: &BinaryMask) -> Result<f64> {
    check_shape("bce", p.shape(), y.shape())?;
    Ok(weighted_sum(p, y, None))
}

/// Annotation-guided BCE: every pixel's log-likelihood scaled by its weight.
pub fn ag_bce(p: &ProbabilityMap, y: &BinaryMask, w: &WeightMap) -> Result<f64> {
    check_shape("ag_bce", p.shape(), y.shape())?;
    check_shape("ag_bce weights", p.shape(), w.shape())?;
    if let Some(bad) = w.weights.iter().find(|&&v| !(v >= 1.0)) {
        return Err(Error::InvalidParam(format!("ag_bce weight {bad} below 1")));
    }
    Ok(weighted_sum(p, y, Some(&w.weights)))
}

/// `∂ ag_bce / ∂ p_i = -(1/K) w_i (y_i / p_i - (1 - y_i) / (1 - p_i))`, evaluated at the clamped `p`.
pub fn ag_bce_grad(p: &ProbabilityMap, y: &BinaryMask, w: &WeightMap) -> Result<Vec<f64>> {
    check_shape("ag_bce_grad", p.shape(), y.shape())?;
    check_shape("ag_bce_grad weights", p.shape(), w.shape())?;
    let k = p.probs.len() as f64;
    Ok(p.probs
        .iter()
        .zip(&y.labels)
        .zip(&w.weights)
        .map(|((&pi, &yi), &wi)| {
            let pi = clamp_prob(pi);
            let yi = f64::from(yi);
            -(wi / k) * (yi / pi - (1.0 - yi) / (1.0 - pi))
        })
        .collect())
}

/// Gradient of `scale · ag_bce(σ(z), y, w)` with respect to the logits `z`, given `σ(z)`.
///
/// Uses the closed form `scale · w_i (σ(z_i) - y_i) / K`, i.e. the derivative of
/// the unclamped loss; it agrees with the clamped one wherever the clamp is inactive.
pub fn logit_grad(sigmoid: &[f64], y: &BinaryMask, weights: Option<&WeightMap>, scale: f64) -> Vec<f64> {
    let k = sigmoid.len() as f64;
    match weights {
        None => sigmoid
            .iter()
            .zip(&y.labels)
            .map(|(&s, &yi)| scale * (s - f64::from(yi)) / k)
            .collect(),
        Some(w) => sigmoid
            .iter()
            .zip(&y.labels)
            .zip(&w.weights)
            .map(|((&s, &yi), &wi)| scale * wi * (s - f64::from(yi)) / k)
            .collect(),
    }
}

/// Ground truth at the four supervision scales.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleTargets {
    pub y1: BinaryMask,
    pub y2: BinaryMask,
    pub y3: BinaryMask,
    pub y4: BinaryMask,
}

impl ScaleTargets {
    /// Downsamples a full-resolution mask by 2, 4 and 8 (nearest neighbour).
    pub fn from_mask(y1: &BinaryMask) -> Result<Self> {
        use crate::synthdata::downsample_mask;
        Ok(Self {
            y2: downsample_mask(y1, 2)?,
            y3: downsample_mask(y1, 4)?,
            y4: downsample_mask(y1, 8)?,
            y1: y1.clone(),
        })
    }
}

/// Individual terms of the combined objective (unweighted by scale coefficient).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// `ag_bce(P1, Y1, W)`
    pub p1: f64,
    /// `bce(P2, Y2)` etc.; `None` without deep supervision.
    pub p2: Option<f64>,
    pub p3: Option<f64>,
    pub p4: Option<f64>,
}

/// `0.125·BCE(P4,Y4) + 0.25·BCE(P3,Y3) + 0.5·BCE(P2,Y2) + 1.0·AG-BCE(P1,Y1,W)`,
/// or the AG-BCE term alone when `deep_supervision` is false.
pub fn training_loss(
    pred: &MultiScalePrediction,
    targets: &ScaleTargets,
    w: &WeightMap,
    deep_supervision: bool,
) -> Result<LossBreakdown> {
    check_shape("training_loss P1", targets.y1.shape(), pred.p1.shape())?;
    let p1 = ag_bce(&pred.p1, &targets.y1, w)?;
    if !deep_supervision {
        return Ok(LossBreakdown {
            total: SCALE_COEFFICIENTS[0] * p1,
            p1,
            p2: None,
            p3: None,
            p4: None,
        });
    }
    let term = |name: &str, p: &Option<ProbabilityMap>, y: &BinaryMask| -> Result<f64> {
        let p = p
            .as_ref()
            .ok_or_else(|| Error::InvalidParam(format!("deep supervision requires {name}")))?;
        check_shape(&format!("training_loss {name}"), y.shape(), p.shape())?;
        bce(p, y)
    };
    let p2 = term("P2", &pred.p2, &targets.y2)?;
    let p3 = term("P3", &pred.p3, &targets.y3)?;
    let p4 = term("P4", &pred.p4, &targets.y4)?;
    let [c1, c2, c3, c4] = SCALE_COEFFICIENTS;
    Ok(LossBreakdown {
        total: c4 * p4 + c3 * p3 + c2 * p2 + c1 * p1,
        p1,
        p2: Some(p2),
        p3: Some(p3),
        p4: Some(p4),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Spacing;

    fn mask(h: usize, w: usize, labels: Vec<u8>) -> BinaryMask {
        BinaryMask::new(h, w, labels, Spacing::default()).unwrap()
    }

    #[test]
    fn uniform_half_gives_ln2() {
        let p = ProbabilityMap::uniform(4, 4, 0.5);
        let y = mask(4, 4, (0..16).map(|i| (i % 3 == 0) as u8).collect());
        assert!((bce(&p, &y).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let y = mask(2, 2, vec![1, 0, 0, 1]);
        let p = ProbabilityMap::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let l = bce(&p, &y).unwrap();
        assert!(l <= -(1.0 - 1e-7f64).ln() + 1e-15, "{l}");
    }

    #[test]
    fn two_by_two_matches_hand_summation() {
        let p = ProbabilityMap::new(2, 2, vec![0.9, 0.2, 0.6, 0.3]).unwrap();
        let y = mask(2, 2, vec![1, 1, 0, 0]);
        let want = -(0.9f64.ln() + 0.2f64.ln() + 0.4f64.ln() + 0.7f64.ln()) / 4.0;
        assert!((bce(&p, &y).unwrap() - want).abs() < 1e-12);

        let w = WeightMap::new(2, 2, vec![12.0, 1.0, 1.0, 1.0]).unwrap();
        let want = -(12.0 * 0.9f64.ln() + 0.2f64.ln() + 0.4f64.ln() + 0.7f64.ln()) / 4.0;
        assert!((ag_bce(&p, &y, &w).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn unit_weights_reduce_to_bce_bitwise() {
        let p = ProbabilityMap::new(2, 3, vec![0.1, 0.7, 0.33, 0.99, 0.5, 0.01]).unwrap();
        let y = mask(2, 3, vec![0, 1, 1, 0, 1, 0]);
        let w = WeightMap::uniform(2, 3, 1.0);
        assert_eq!(ag_bce(&p, &y, &w).unwrap().to_bits(), bce(&p, &y).unwrap().to_bits());
    }

    #[test]
    fn errors_on_shape_and_weight() {
        let p = ProbabilityMap::uniform(2, 2, 0.5);
        let y = mask(2, 3, vec![0; 6]);
        assert!(bce(&p, &y).is_err());
        let y = mask(2, 2, vec![0; 4]);
        let mut w = WeightMap::uniform(2, 2, 1.0);
        w.weights[3] = 0.5;
        assert!(ag_bce(&p, &y, &w).is_err());
    }

    #[test]
    fn uniform_half_training_loss_is_1_875_ln2() {
        let y1 = BinaryMask::from_fn(16, 16, Spacing::default(), |r, c| (r + c) % 2 == 0);
        let t = ScaleTargets::from_mask(&y1).unwrap();
        let pred = MultiScalePrediction {
            p1: ProbabilityMap::uniform(16, 16, 0.5),
            p2: Some(ProbabilityMap::uniform(8, 8, 0.5)),
            p3: Some(ProbabilityMap::uniform(4, 4, 0.5)),
            p4: Some(ProbabilityMap::uniform(2, 2, 0.5)),
        };
        let w = WeightMap::uniform(16, 16, 1.0);
        let l = training_loss(&pred, &t, &w, true).unwrap();
        assert!((l.total - 1.875 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l.total - 1.29965).abs() < 1e-5);
        let single = training_loss(&pred, &t, &w, false).unwrap();
        assert_eq!(single.total, single.p1);
        assert!(single.p2.is_none());
    }

    #[test]
    fn missing_scale_is_named() {
        let y1 = BinaryMask::zeros(16, 16, Spacing::default());
        let t = ScaleTargets::from_mask(&y1).unwrap();
        let pred = MultiScalePrediction {
            p1: ProbabilityMap::uniform(16, 16, 0.5),
            p2: Some(ProbabilityMap::uniform(8, 8, 0.5)),
            p3: Some(ProbabilityMap::uniform(3, 3, 0.5)),
            p4: Some(ProbabilityMap::uniform(2, 2, 0.5)),
        };
        let err = training_loss(&pred, &t, &WeightMap::uniform(16, 16, 1.0), true).unwrap_err();
        assert!(err.to_string().contains("P3"), "{err}");
    }

    #[test]
    fn logit_grad_matches_chain_rule() {
        let s = [0.2, 0.7, 0.5];
        let y = mask(1, 3, vec![1, 0, 1]);
        let w = WeightMap::new(1, 3, vec![12.0, 1.0, 1.0]).unwrap();
        let p = ProbabilityMap::new(1, 3, s.to_vec()).unwrap();
        let dp = ag_bce_grad(&p, &y, &w).unwrap();
        let dz = logit_grad(&s, &y, Some(&w), 1.0);
        for i in 0..3 {
            let chain = dp[i] * s[i] * (1.0 - s[i]);
            assert!((chain - dz[i]).abs() < 1e-14);
        }
    }
}
