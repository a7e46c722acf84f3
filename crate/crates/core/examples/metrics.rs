//! Dice, region Dice and HD95 (directed and pooled) between annotators.

use microsegnet::hard_region::{compute_hard_mask, easy_mask};
use microsegnet::metrics::{dice, hausdorff, hd95, hd_percentile, region_dice, PercentileMode};
use microsegnet::synthdata::{generate_dataset, PerturbParams, SynthParams};

fn main() -> microsegnet::Result<()> {
    let params = SynthParams {
        num_cases: 3,
        slices_per_case: 1,
        ..SynthParams::default()
    };
    let ds = generate_dataset(&params, &PerturbParams::default(), 0)?;
    for case in &ds.cases {
        let rec = &case.slices[0];
        let (g, p) = (&rec.expert_mask, &rec.nonexpert_mask);
        let hard = compute_hard_mask(g, p)?;
        println!(
            "{}: dice {:.4} (easy region {:.4}), hd95 {:.3} mm, pooled hd95 {:.3} mm, hausdorff {:.3} mm",
            rec.case_id,
            dice(g, p)?,
            region_dice(g, p, &easy_mask(&hard))?,
            hd95(g, p, g.spacing)?,
            hd_percentile(g, p, g.spacing, 0.95, PercentileMode::Pooled)?,
            hausdorff(g, p, g.spacing)?
        );
    }
    Ok(())
}
