use crate::domain::{BinaryMask, CaseRecord, Image2D};
use crate::error::{Error, Result};

fn taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Bilinear resize to `target × target`, then min-max normalisation to `[0, 1]`.
///
/// The pixel spacing is rescaled so physical extent is preserved. A constant
/// image maps to all zeros.
pub fn preprocess(image: &Image2D, target: usize) -> Result<Image2D> {
    if target < 8 {
        return Err(Error::InvalidParam(format!("target size {target} below 8")));
    }
    let (h, w) = image.shape();
    let resized: Vec<f64> = if (h, w) == (target, target) {
        image.pixels.iter().map(|&v| f64::from(v)).collect()
    } else {
        let ty = taps(h, target);
        let tx = taps(w, target);
        let mut out = Vec::with_capacity(target * target);
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let g = |r: usize, c: usize| f64::from(image.get(r, c));
                let top = g(y0, x0) * (1.0 - fx) + g(y0, x1) * fx;
                let bot = g(y1, x0) * (1.0 - fx) + g(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
        out
    };
    let lo = resized.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = resized.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pixels: Vec<f32> = if hi > lo {
        resized.iter().map(|&v| ((v - lo) / (hi - lo)) as f32).collect()
    } else {
        log::warn!(
            "{} slice {}: constant image, normalised to zeros",
            image.case_id,
            image.slice_index
        );
        vec![0.0; target * target]
    };
    Image2D::new(
        target,
        target,
        pixels,
        image.spacing.scaled(h as f64 / target as f64, w as f64 / target as f64),
        image.case_id.clone(),
        image.slice_index,
    )
}

/// Nearest-neighbour resize of a mask to `target × target`.
pub fn resize_mask_nearest(mask: &BinaryMask, target: usize) -> BinaryMask {
    let (h, w) = mask.shape();
    if (h, w) == (target, target) {
        return mask.clone();
    }
    let pick = |src: usize, i: usize| (((i as f64 + 0.5) * src as f64 / target as f64) as usize).min(src - 1);
    let mut labels = Vec::with_capacity(target * target);
    for r in 0..target {
        for c in 0..target {
            labels.push(mask.labels[pick(h, r) * w + pick(w, c)]);
        }
    }
    BinaryMask {
        height: target,
        width: target,
        labels,
        spacing: mask.spacing.scaled(h as f64 / target as f64, w as f64 / target as f64),
    }
}

/// Preprocesses the image and brings every mask of the record to the same size.
pub fn preprocess_record(record: &CaseRecord, target: usize) -> Result<CaseRecord> {
    let image = preprocess(&record.image, target)?;
    Ok(CaseRecord {
        image,
        expert_mask: resize_mask_nearest(&record.expert_mask, target),
        nonexpert_mask: resize_mask_nearest(&record.nonexpert_mask, target),
        hard_mask: record.hard_mask.as_ref().map(|m| resize_mask_nearest(m, target)),
        weight_map: None,
        case_id: record.case_id.clone(),
        slice_index: record.slice_index,
    })
}

/// Keeps the top-left pixel of every `factor × factor` block.
pub fn downsample_mask(mask: &BinaryMask, factor: usize) -> Result<BinaryMask> {
    if factor == 0 {
        return Err(Error::InvalidParam("downsample factor 0".into()));
    }
    let (h, w) = mask.shape();
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::InvalidParam(format!(
            "mask {h}x{w} not divisible by downsample factor {factor}"
        )));
    }
    let (ho, wo) = (h / factor, w / factor);
    let mut labels = Vec::with_capacity(ho * wo);
    for r in 0..ho {
        for c in 0..wo {
            labels.push(mask.labels[r * factor * w + c * factor]);
        }
    }
    Ok(BinaryMask {
        height: ho,
        width: wo,
        labels,
        spacing: mask.spacing.scaled(factor as f64, factor as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Spacing;
    use proptest::prelude::*;

    fn image(n: usize, f: impl Fn(usize, usize) -> f32) -> Image2D {
        let mut px = Vec::new();
        for r in 0..n {
            for c in 0..n {
                px.push(f(r, c));
            }
        }
        Image2D::new(n, n, px, Spacing::default(), "c", 0).unwrap()
    }

    #[test]
    fn halving_resize_doubles_spacing() {
        let img = image(448, |r, c| ((r * 7 + c * 3) % 256) as f32);
        let out = preprocess(&img, 224).unwrap();
        assert_eq!(out.shape(), (224, 224));
        assert!((out.spacing.row - 0.2).abs() < 1e-12 && (out.spacing.col - 0.2).abs() < 1e-12);
    }

    #[test]
    fn normalised_same_size_input_is_unchanged() {
        let img = image(224, |r, c| ((r + c) % 224) as f32 / 223.0);
        let out = preprocess(&img, 224).unwrap();
        for (a, b) in img.pixels.iter().zip(&out.pixels) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn min_max_normalisation() {
        let img = image(16, |r, c| 10.0 + ((r * 16 + c) as f32) * 240.0 / 255.0);
        let out = preprocess(&img, 16).unwrap();
        let lo = out.pixels.iter().copied().fold(f32::MAX, f32::min);
        let hi = out.pixels.iter().copied().fold(f32::MIN, f32::max);
        assert_eq!((lo, hi), (0.0, 1.0));
    }

    #[test]
    fn constant_image_becomes_zeros() {
        let out = preprocess(&image(12, |_, _| 3.0), 8).unwrap();
        assert!(out.pixels.iter().all(|&v| v == 0.0));
        assert!(preprocess(&image(12, |_, _| 3.0), 4).is_err());
    }

    #[test]
    fn checkerboard_downsample_picks_top_left() {
        let m = BinaryMask::new(4, 4, vec![1, 0, 0, 1, 0, 1, 1, 0, 1, 1, 0, 0, 0, 0, 1, 1], Spacing::default()).unwrap();
        let d = downsample_mask(&m, 2).unwrap();
        assert_eq!(d.labels, vec![1, 0, 1, 0]);
        assert!((d.spacing.row - 0.2).abs() < 1e-12);
        let ones = BinaryMask::ones(16, 16, Spacing::default());
        assert_eq!(downsample_mask(&ones, 8).unwrap().labels, vec![1; 4]);
        assert!(downsample_mask(&BinaryMask::zeros(6, 6, Spacing::default()), 4).is_err());
    }

    proptest! {
        #[test]
        fn downsampling_composes(bits in prop::collection::vec(0u8..2, 256)) {
            let m = BinaryMask::new(16, 16, bits, Spacing::default()).unwrap();
            let twice = downsample_mask(&downsample_mask(&m, 2).unwrap(), 2).unwrap();
            let once = downsample_mask(&m, 4).unwrap();
            prop_assert_eq!(&twice.labels, &once.labels);
            prop_assert!(once.is_binary());
        }
    }
}
