//! Generate a small synthetic micro-ultrasound dataset and write it to disk.
//!
//! `cargo run --example generate_data -- [OUT_DIR]`

use microsegnet::metrics::dice;
use microsegnet::synthdata::{generate_dataset, write_dataset, PerturbParams, Split, SynthParams};

fn main() -> microsegnet::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "example_data".into());
    let params = SynthParams {
        num_cases: 8,
        slices_per_case: 2,
        image_size: 128,
        ..SynthParams::default()
    };
    let annotator = PerturbParams {
        amplitude_px: 1.5,
        ..PerturbParams::default()
    };
    let ds = generate_dataset(&params, &annotator, 2)?;
    for rec in ds.records_in(Split::Train).iter().take(4) {
        println!(
            "{} slice {}: prostate area {:.3}, expert vs non-expert dice {:.3}",
            rec.case_id,
            rec.slice_index,
            rec.expert_mask.area_fraction(),
            dice(&rec.expert_mask, &rec.nonexpert_mask)?
        );
    }
    let summary = write_dataset(&ds, out.as_ref())?;
    println!(
        "{} slices, {} train / {} test patients -> {}",
        summary.slices,
        summary.train_cases,
        summary.test_cases,
        summary.root.display()
    );
    Ok(())
}
