//! Evaluate a checkpoint per patient, with CSV tables and overlay PNGs.
//!
//! Pass a checkpoint and dataset directory, or nothing to train a throwaway model:
//! `cargo run --release --example evaluate -- [CKPT DATA_DIR]`

use std::path::Path;

use microsegnet::checkpoint::Checkpoint;
use microsegnet::config::{ModelConfig, TrainConfig};
use microsegnet::eval::{evaluate, write_overlays, write_patient_csv, EvalOptions};
use microsegnet::metrics::PercentileMode;
use microsegnet::synthdata::{generate_dataset, load_dataset, PerturbParams, Split, SynthParams};
use microsegnet::trainer::train;

fn main() -> microsegnet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (model, ds) = if let [ckpt, data] = args.as_slice() {
        (Checkpoint::load(Path::new(ckpt))?.model, load_dataset(Path::new(data))?)
    } else {
        let p = SynthParams {
            num_cases: 8,
            slices_per_case: 2,
            image_size: 64,
            ..SynthParams::default()
        };
        let ds = generate_dataset(&p, &PerturbParams::default(), 2)?;
        let cfg = ModelConfig {
            input_size: 64,
            ..ModelConfig::tiny()
        };
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        (train(&cfg, &tc, &ds)?.checkpoint.model, ds)
    };

    for mode in [PercentileMode::Directed, PercentileMode::Pooled] {
        let rep = evaluate(&model, &ds, Split::Test, EvalOptions { mode, ..EvalOptions::default() })?;
        println!("{mode:?} HD95:");
        for p in &rep.patients {
            println!("  {}: dice {:.4}, hd95 {:?} mm, hard {:.4}, easy {:.4}", p.case_id, p.dice, p.hd95_mm, p.hard_dice, p.easy_dice);
        }
        println!("  mean dice {:.4}, mean hd95 {:?}", rep.mean_dice, rep.mean_hd95_mm);
        if mode == PercentileMode::Directed {
            write_patient_csv(&rep, Path::new("example_patients.csv"))?;
        }
    }
    let written = write_overlays(&model, &ds, Split::Test, 0.5, 2, Path::new("example_overlays"))?;
    println!("{} overlays written", written.len());
    Ok(())
}
