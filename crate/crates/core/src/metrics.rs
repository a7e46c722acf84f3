//! Overlap and surface-distance metrics.
//!
//! [`hd95`] measures boundary distances through an exact Euclidean distance
//! transform; [`hd95_exhaustive`] computes the same quantity from all boundary
//! pairs and serves as the reference it is tested against.

use crate::domain::{BinaryMask, Spacing};
use crate::error::{Error, Result};

fn same_shape(context: &str, a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(context, a.shape(), b.shape()));
    }
    Ok(())
}

fn dice_counts(inter: usize, g: usize, p: usize) -> f64 {
    if g + p == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (g + p) as f64
    }
}

/// `2|G ∩ P| / (|G| + |P|)`; two empty masks score 1.
pub fn dice(g: &BinaryMask, p: &BinaryMask) -> Result<f64> {
    same_shape("dice", g, p)?;
    let (mut inter, mut ng, mut np) = (0usize, 0usize, 0usize);
    for (&a, &b) in g.labels.iter().zip(&p.labels) {
        let (a, b) = (a == 1, b == 1);
        inter += usize::from(a && b);
        ng += usize::from(a);
        np += usize::from(b);
    }
    Ok(dice_counts(inter, ng, np))
}

/// Dice with all three counts restricted to pixels where `region` is set.
pub fn region_dice(g: &BinaryMask, p: &BinaryMask, region: &BinaryMask) -> Result<f64> {
    same_shape("region_dice", g, p)?;
    same_shape("region_dice region", g, region)?;
    let (mut inter, mut ng, mut np) = (0usize, 0usize, 0usize);
    for ((&a, &b), &r) in g.labels.iter().zip(&p.labels).zip(&region.labels) {
        if r != 1 {
            continue;
        }
        let (a, b) = (a == 1, b == 1);
        inter += usize::from(a && b);
        ng += usize::from(a);
        np += usize::from(b);
    }
    Ok(dice_counts(inter, ng, np))
}

/// Foreground pixels with a 4-neighbour that is background or outside the image.
pub fn extract_boundary(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = mask.shape();
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let edge = r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1);
            if edge {
                out.push((r, c));
            }
        }
    }
    out
}

/// How directed distances from both boundaries are reduced to one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PercentileMode {
    /// Max of the two directed 95th percentiles.
    #[default]
    Directed,
    /// 95th percentile of both directed lists pooled together.
    Pooled,
}

/// Linear-interpolation percentile (`q` in `[0, 1]`) of an ascending slice.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Squared Euclidean distance (mm²) from every pixel to the nearest seed pixel.
///
/// Separable lower-envelope transform with per-axis spacing.
pub fn squared_distance_transform(
    h: usize,
    w: usize,
    seeds: &[(usize, usize)],
    spacing: Spacing,
) -> Vec<f64> {
    let mut f = vec![f64::INFINITY; h * w];
    for &(r, c) in seeds {
        f[r * w + c] = 0.0;
    }
    let mut col = vec![0.0; h];
    for c in 0..w {
        for r in 0..h {
            col[r] = f[r * w + c];
        }
        let d = envelope_1d(&col, spacing.row);
        for r in 0..h {
            f[r * w + c] = d[r];
        }
    }
    for r in 0..h {
        let d = envelope_1d(&f[r * w..(r + 1) * w], spacing.col);
        f[r * w..(r + 1) * w].copy_from_slice(&d);
    }
    f
}

/// `d(p) = min_q (step·(p - q))² + f(q)` over the finite entries of `f`.
fn envelope_1d(f: &[f64], step: f64) -> Vec<f64> {
    let n = f.len();
    let sites: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if sites.is_empty() {
        return vec![f64::INFINITY; n];
    }
    let pos = |q: usize| q as f64 * step;
    let meet = |a: usize, b: usize| {
        ((f[b] + pos(b) * pos(b)) - (f[a] + pos(a) * pos(a))) / (2.0 * (pos(b) - pos(a)))
    };
    let mut hull: Vec<usize> = Vec::with_capacity(sites.len());
    let mut starts: Vec<f64> = Vec::with_capacity(sites.len());
    for &q in &sites {
        loop {
            match hull.last() {
                None => {
                    hull.push(q);
                    starts.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&top) => {
                    let s = meet(top, q);
                    if s <= *starts.last().expect("parallel to hull") {
                        hull.pop();
                        starts.pop();
                    } else {
                        hull.push(q);
                        starts.push(s);
                        break;
                    }
                }
            }
        }
    }
    let mut out = vec![0.0; n];
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        let x = pos(p);
        while k + 1 < hull.len() && starts[k + 1] < x {
            k += 1;
        }
        let d = x - pos(hull[k]);
        *o = d * d + f[hull[k]];
    }
    out
}

fn boundaries(g: &BinaryMask, p: &BinaryMask) -> Result<(Vec<(usize, usize)>, Vec<(usize, usize)>)> {
    same_shape("hd95", g, p)?;
    let bg = extract_boundary(g);
    let bp = extract_boundary(p);
    if bg.is_empty() {
        return Err(Error::EmptyBoundary("ground-truth mask is empty".into()));
    }
    if bp.is_empty() {
        return Err(Error::EmptyBoundary("predicted mask is empty".into()));
    }
    Ok((bg, bp))
}

fn directed_via_transform(from: &[(usize, usize)], to: &[(usize, usize)], h: usize, w: usize, sp: Spacing) -> Vec<f64> {
    let dt = squared_distance_transform(h, w, to, sp);
    let mut d: Vec<f64> = from.iter().map(|&(r, c)| dt[r * w + c].sqrt()).collect();
    d.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    d
}

fn reduce(dg: &[f64], dp: &[f64], mode: PercentileMode, q: f64) -> f64 {
    match mode {
        PercentileMode::Directed => percentile_sorted(dg, q).max(percentile_sorted(dp, q)),
        PercentileMode::Pooled => {
            let mut all: Vec<f64> = dg.iter().chain(dp).copied().collect();
            all.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
            percentile_sorted(&all, q)
        }
    }
}

/// 95th-percentile Hausdorff distance in millimetres.
pub fn hd95(g: &BinaryMask, p: &BinaryMask, spacing: Spacing) -> Result<f64> {
    hd_percentile(g, p, spacing, 0.95, PercentileMode::Directed)
}

/// Percentile Hausdorff distance with an explicit percentile and reduction mode.
pub fn hd_percentile(g: &BinaryMask, p: &BinaryMask, spacing: Spacing, q: f64, mode: PercentileMode) -> Result<f64> {
    let (bg, bp) = boundaries(g, p)?;
    let (h, w) = g.shape();
    let dg = directed_via_transform(&bg, &bp, h, w, spacing);
    let dp = directed_via_transform(&bp, &bg, h, w, spacing);
    Ok(reduce(&dg, &dp, mode, q))
}

/// Exact (maximum) Hausdorff distance in millimetres.
pub fn hausdorff(g: &BinaryMask, p: &BinaryMask, spacing: Spacing) -> Result<f64> {
    hd_percentile(g, p, spacing, 1.0, PercentileMode::Directed)
}

/// Reference implementation of [`hd_percentile`] by exhaustive pairwise distances.
pub fn hd95_exhaustive(g: &BinaryMask, p: &BinaryMask, spacing: Spacing, mode: PercentileMode) -> Result<f64> {
    let (bg, bp) = boundaries(g, p)?;
    let dist = |a: (usize, usize), b: (usize, usize)| {
        let dr = (a.0 as f64 - b.0 as f64) * spacing.row;
        let dc = (a.1 as f64 - b.1 as f64) * spacing.col;
        (dr * dr + dc * dc).sqrt()
    };
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| {
        let mut d: Vec<f64> = from
            .iter()
            .map(|&a| to.iter().map(|&b| dist(a, b)).fold(f64::INFINITY, f64::min))
            .collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        d
    };
    Ok(reduce(&directed(&bg, &bp), &directed(&bp, &bg), mode, 0.95))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sp() -> Spacing {
        Spacing::new(0.1, 0.1)
    }

    #[test]
    fn dice_edge_cases() {
        let g = BinaryMask::from_fn(6, 6, sp(), |r, c| r < 3 && c < 3);
        assert_eq!(dice(&g, &g).unwrap(), 1.0);
        assert_eq!(dice(&g, &BinaryMask::zeros(6, 6, sp())).unwrap(), 0.0);
        let e = BinaryMask::zeros(6, 6, sp());
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn shifted_block_dice_is_half() {
        let g = BinaryMask::from_fn(6, 6, sp(), |r, c| (1..3).contains(&r) && (1..3).contains(&c));
        let p = BinaryMask::from_fn(6, 6, sp(), |r, c| (1..3).contains(&r) && (2..4).contains(&c));
        assert_eq!(dice(&g, &p).unwrap(), 0.5);
    }

    #[test]
    fn region_dice_over_full_image_is_plain_dice() {
        let g = BinaryMask::from_fn(8, 8, sp(), |r, c| r + c < 7);
        let p = BinaryMask::from_fn(8, 8, sp(), |r, c| r + 2 * c < 9);
        let all = BinaryMask::ones(8, 8, sp());
        assert_eq!(region_dice(&g, &p, &all).unwrap(), dice(&g, &p).unwrap());
    }

    #[test]
    fn boundary_rules() {
        let single = BinaryMask::from_fn(5, 5, sp(), |r, c| r == 2 && c == 2);
        assert_eq!(extract_boundary(&single), vec![(2, 2)]);
        let block = BinaryMask::from_fn(7, 7, sp(), |r, c| (2..5).contains(&r) && (2..5).contains(&c));
        let b = extract_boundary(&block);
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&(3, 3)));
        let full = BinaryMask::ones(4, 5, sp());
        assert_eq!(extract_boundary(&full).len(), 2 * 5 + 2 * 2);
        assert!(extract_boundary(&BinaryMask::zeros(4, 4, sp())).is_empty());
    }

    #[test]
    fn hd95_cases() {
        let g = BinaryMask::from_fn(10, 10, sp(), |r, c| r > 2 && c > 2 && r < 7 && c < 8);
        assert_eq!(hd95(&g, &g, sp()).unwrap(), 0.0);
        let a = BinaryMask::from_fn(10, 10, sp(), |r, c| r == 4 && c == 1);
        let b = BinaryMask::from_fn(10, 10, sp(), |r, c| r == 4 && c == 6);
        assert!((hd95(&a, &b, sp()).unwrap() - 0.5).abs() < 1e-12);
        let e = BinaryMask::zeros(10, 10, sp());
        assert!(matches!(hd95(&g, &e, sp()), Err(Error::EmptyBoundary(_))));
    }

    #[test]
    fn anisotropic_spacing_is_respected() {
        let a = BinaryMask::from_fn(12, 12, sp(), |r, c| r == 1 && c == 1);
        let b = BinaryMask::from_fn(12, 12, sp(), |r, c| r == 4 && c == 5);
        let s = Spacing::new(0.2, 0.05);
        let want = ((3.0f64 * 0.2).powi(2) + (4.0f64 * 0.05).powi(2)).sqrt();
        assert!((hd95(&a, &b, s).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn percentile_interpolates() {
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile_sorted(&v, 0.5), 2.0);
        assert!((percentile_sorted(&v, 0.95) - 3.8).abs() < 1e-12);
        assert_eq!(percentile_sorted(&[7.0], 0.95), 7.0);
    }

    fn arb_mask() -> impl Strategy<Value = BinaryMask> {
        prop::collection::vec(prop::bool::weighted(0.4), 256).prop_map(|v| {
            BinaryMask::new(16, 16, v.into_iter().map(u8::from).collect(), Spacing::new(0.1, 0.15)).unwrap()
        })
    }

    proptest! {
        #[test]
        fn transform_route_matches_exhaustive(g in arb_mask(), p in arb_mask()) {
            prop_assume!(!g.is_empty() && !p.is_empty());
            let s = Spacing::new(0.1, 0.15);
            for mode in [PercentileMode::Directed, PercentileMode::Pooled] {
                let fast = hd_percentile(&g, &p, s, 0.95, mode).unwrap();
                let slow = hd95_exhaustive(&g, &p, s, mode).unwrap();
                prop_assert!((fast - slow).abs() < 1e-9, "{} vs {}", fast, slow);
            }
            prop_assert!(hd95(&g, &p, s).unwrap() <= hausdorff(&g, &p, s).unwrap() + 1e-12);
            prop_assert_eq!(dice(&g, &p).unwrap(), dice(&p, &g).unwrap());
            prop_assert!((hd95(&g, &p, s).unwrap() - hd95(&p, &g, s).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn metrics_are_translation_invariant(dr in 0usize..4, dc in 0usize..4) {
            let g = BinaryMask::from_fn(24, 24, sp(), |r, c| (4..10).contains(&r) && (3..11).contains(&c));
            let p = BinaryMask::from_fn(24, 24, sp(), |r, c| (5..12).contains(&r) && (4..9).contains(&c));
            let shift = |m: &BinaryMask| BinaryMask::from_fn(24, 24, sp(), |r, c| r >= dr && c >= dc && m.get(r - dr, c - dc));
            prop_assert_eq!(dice(&g, &p).unwrap(), dice(&shift(&g), &shift(&p)).unwrap());
            prop_assert!((hd95(&g, &p, sp()).unwrap() - hd95(&shift(&g), &shift(&p), sp()).unwrap()).abs() < 1e-12);
        }
    }
}
