//! Hard/easy regions from paired annotations, and the weight maps they induce.

use crate::domain::{BinaryMask, CaseRecord, WeightMap};
use crate::error::{Error, Result};

/// Pixels where the two annotators disagree (pixelwise XOR).
pub fn compute_hard_mask(expert: &BinaryMask, nonexpert: &BinaryMask) -> Result<BinaryMask> {
    if expert.shape() != nonexpert.shape() {
        return Err(Error::shape("compute_hard_mask", expert.shape(), nonexpert.shape()));
    }
    Ok(BinaryMask {
        height: expert.height,
        width: expert.width,
        labels: expert
            .labels
            .iter()
            .zip(&nonexpert.labels)
            .map(|(&a, &b)| u8::from((a != 0) != (b != 0)))
            .collect(),
        spacing: expert.spacing,
    })
}

/// Complement of the hard region.
pub fn easy_mask(hard: &BinaryMask) -> BinaryMask {
    hard.complement()
}

/// `w_hard` on hard pixels, `w_easy` elsewhere.
pub fn build_weight_map(hard: &BinaryMask, w_hard: f64, w_easy: f64) -> Result<WeightMap> {
    if !(w_easy >= 1.0) || !(w_hard >= w_easy) || !w_hard.is_finite() {
        return Err(Error::InvalidParam(format!(
            "weights must satisfy w_hard >= w_easy >= 1, got w_hard={w_hard}, w_easy={w_easy}"
        )));
    }
    Ok(WeightMap {
        height: hard.height,
        width: hard.width,
        weights: hard
            .labels
            .iter()
            .map(|&h| if h == 1 { w_hard } else { w_easy })
            .collect(),
    })
}

/// Grows `mask` by a Euclidean disk of radius `radius_px` pixels.
pub fn dilate(mask: &BinaryMask, radius_px: usize) -> BinaryMask {
    if radius_px == 0 {
        return mask.clone();
    }
    let r = radius_px as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|&(dy, dx)| dy * dy + dx * dx <= r * r)
        .collect();
    let (h, w) = (mask.height as isize, mask.width as isize);
    let mut out = BinaryMask::zeros(mask.height, mask.width, mask.spacing);
    for y in 0..h {
        for x in 0..w {
            if mask.labels[(y * w + x) as usize] != 1 {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (yy, xx) = (y + dy, x + dx);
                if yy >= 0 && yy < h && xx >= 0 && xx < w {
                    out.labels[(yy * w + xx) as usize] = 1;
                }
            }
        }
    }
    out
}

/// Fills `hard_mask` and `weight_map` on a record.
pub fn annotate_record(record: &mut CaseRecord, w_hard: f64, w_easy: f64, dilate_px: usize) -> Result<()> {
    let hard = compute_hard_mask(&record.expert_mask, &record.nonexpert_mask)?;
    let weights = build_weight_map(&dilate(&hard, dilate_px), w_hard, w_easy)?;
    record.hard_mask = Some(hard);
    record.weight_map = Some(weights);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Spacing;
    use proptest::prelude::*;

    fn sp() -> Spacing {
        Spacing::default()
    }

    #[test]
    fn agreement_gives_empty_hard_region() {
        let m = BinaryMask::from_fn(8, 8, sp(), |r, c| r < 4 && c > 2);
        assert!(compute_hard_mask(&m, &m).unwrap().is_empty());
    }

    #[test]
    fn disjoint_masks_give_union() {
        let a = BinaryMask::from_fn(8, 8, sp(), |r, _| r < 2);
        let b = BinaryMask::from_fn(8, 8, sp(), |r, _| r > 5);
        let union = BinaryMask::from_fn(8, 8, sp(), |r, _| r < 2 || r > 5);
        assert_eq!(compute_hard_mask(&a, &b).unwrap(), union);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = BinaryMask::zeros(8, 8, sp());
        let b = BinaryMask::zeros(8, 9, sp());
        assert!(compute_hard_mask(&a, &b).is_err());
    }

    #[test]
    fn weight_map_sums_to_twelve_k_plus_rest() {
        let hard = BinaryMask::from_fn(10, 10, sp(), |r, c| r == c || r == 0);
        let k = hard.count();
        let w = build_weight_map(&hard, 12.0, 1.0).unwrap();
        let total: f64 = w.weights.iter().sum();
        assert_eq!(total, 12.0 * k as f64 + (100 - k) as f64);
    }

    #[test]
    fn degenerate_and_empty_weight_maps_are_uniform() {
        let hard = BinaryMask::from_fn(6, 6, sp(), |r, _| r == 3);
        assert!(build_weight_map(&hard, 1.0, 1.0).unwrap().weights.iter().all(|&w| w == 1.0));
        let empty = BinaryMask::zeros(6, 6, sp());
        assert!(build_weight_map(&empty, 12.0, 2.0).unwrap().weights.iter().all(|&w| w == 2.0));
    }

    #[test]
    fn invalid_weights_are_rejected() {
        let hard = BinaryMask::zeros(4, 4, sp());
        assert!(build_weight_map(&hard, 0.5, 1.0).is_err());
        assert!(build_weight_map(&hard, 2.0, 3.0).is_err());
        assert!(build_weight_map(&hard, 2.0, 0.9).is_err());
    }

    #[test]
    fn dilation_grows_single_pixel_to_disk() {
        let m = BinaryMask::from_fn(9, 9, sp(), |r, c| r == 4 && c == 4);
        let d = dilate(&m, 1);
        assert_eq!(d.count(), 5);
        assert_eq!(dilate(&m, 0), m);
    }

    fn arb_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
        (prop::collection::vec(0u8..2, 256), prop::collection::vec(0u8..2, 256)).prop_map(|(a, b)| {
            (
                BinaryMask::new(16, 16, a, Spacing::default()).unwrap(),
                BinaryMask::new(16, 16, b, Spacing::default()).unwrap(),
            )
        })
    }

    proptest! {
        #[test]
        fn hard_mask_is_pixelwise_xor((a, b) in arb_pair()) {
            let hard = compute_hard_mask(&a, &b).unwrap();
            for r in 0..16 {
                for c in 0..16 {
                    prop_assert_eq!(hard.get(r, c), a.get(r, c) ^ b.get(r, c));
                }
            }
            prop_assert_eq!(&hard, &compute_hard_mask(&b, &a).unwrap());
            let easy = easy_mask(&hard);
            prop_assert!(hard.labels.iter().zip(&easy.labels).all(|(&h, &e)| h + e == 1));
            let w = build_weight_map(&hard, 12.0, 1.0).unwrap();
            prop_assert!(w.levels().len() <= 2);
        }
    }
}
