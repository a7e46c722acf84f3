//! BCE, AG-BCE and the four-scale deep-supervision objective on a toy instance.

use microsegnet::domain::{BinaryMask, MultiScalePrediction, ProbabilityMap, Spacing, WeightMap};
use microsegnet::hard_region::build_weight_map;
use microsegnet::losses::{ag_bce, ag_bce_grad, bce, training_loss, ScaleTargets};

fn main() -> microsegnet::Result<()> {
    let s = Spacing::default();
    let y = BinaryMask::from_fn(16, 16, s, |r, c| (4..12).contains(&r) && (4..12).contains(&c));
    // a prediction that is off by one column on the right edge
    let probs = (0..256)
        .map(|i| if (4..12).contains(&(i / 16)) && (4..13).contains(&(i % 16)) { 0.9 } else { 0.05 })
        .collect();
    let p = ProbabilityMap::new(16, 16, probs)?;
    let hard = BinaryMask::from_fn(16, 16, s, |r, c| (4..12).contains(&r) && (11..13).contains(&c));

    println!("bce                 {:.6}", bce(&p, &y)?);
    println!("ag_bce, w = 1       {:.6}", ag_bce(&p, &y, &WeightMap::uniform(16, 16, 1.0))?);
    for ratio in [4.0, 12.0, 24.0] {
        println!("ag_bce, ratio {ratio:>4}  {:.6}", ag_bce(&p, &y, &build_weight_map(&hard, ratio, 1.0)?)?);
    }
    let w = build_weight_map(&hard, 12.0, 1.0)?;
    let g = ag_bce_grad(&p, &y, &w)?;
    println!("largest |dL/dp|     {:.6}", g.iter().fold(0.0f64, |m, v| m.max(v.abs())));

    let half = |n| ProbabilityMap::uniform(n, n, 0.5);
    let pred = MultiScalePrediction {
        p1: p,
        p2: Some(half(8)),
        p3: Some(half(4)),
        p4: Some(half(2)),
    };
    let parts = training_loss(&pred, &ScaleTargets::from_mask(&y)?, &w, true)?;
    println!("training loss {:.6} = P1 {:.6} + 0.5·{:.6} + 0.25·{:.6} + 0.125·{:.6}",
        parts.total, parts.p1, parts.p2.unwrap(), parts.p3.unwrap(), parts.p4.unwrap());
    Ok(())
}
