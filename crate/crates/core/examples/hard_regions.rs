//! Hard regions and AG-BCE weight maps from an expert/non-expert pair.

use microsegnet::hard_region::{build_weight_map, compute_hard_mask, dilate, easy_mask};
use microsegnet::synthdata::{generate_slice, simulate_nonexpert, PerturbParams, SynthParams};

fn main() -> microsegnet::Result<()> {
    let params = SynthParams {
        image_size: 128,
        ..SynthParams::default()
    };
    let rec = generate_slice(&params, 0, 0)?;
    for amplitude in [0.0, 1.0, 2.0, 4.0] {
        let annot = PerturbParams {
            amplitude_px: amplitude,
            blur_sector: Some(params.blur_sector),
            ..PerturbParams::default()
        };
        let non = simulate_nonexpert(&rec.expert_mask, &annot)?;
        let hard = compute_hard_mask(&rec.expert_mask, &non)?;
        let w = build_weight_map(&hard, 12.0, 1.0)?;
        let total: f64 = w.weights.iter().sum();
        println!(
            "amplitude {amplitude:>3} px: hard {:>5} px ({:.2}%), easy {} px, weights {:?} sum {total}, dilated(2) {} px",
            hard.count(),
            100.0 * hard.area_fraction(),
            easy_mask(&hard).count(),
            w.levels(),
            dilate(&hard, 2).count()
        );
    }
    Ok(())
}
