//! Sweep the hard/easy weight ratio and plot mean Dice and HD95 against it.
//!
//! `cargo run --release --example ablation`

use std::path::Path;

use microsegnet::config::{ModelConfig, TrainConfig};
use microsegnet::eval::EvalOptions;
use microsegnet::experiments::{ablate_weight_ratio, plot_ablation, write_ablation_csv};
use microsegnet::synthdata::{generate_dataset, PerturbParams, SynthParams};

fn main() -> microsegnet::Result<()> {
    let p = SynthParams {
        num_cases: 8,
        slices_per_case: 2,
        image_size: 64,
        ..SynthParams::default()
    };
    let ds = generate_dataset(&p, &PerturbParams::default(), 2)?;
    let model = ModelConfig {
        input_size: 64,
        ..ModelConfig::tiny()
    };
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let rows = ablate_weight_ratio(&[1.0, 4.0, 12.0], &model, &cfg, &ds, 2, EvalOptions::default())?;
    for r in &rows {
        let m = |v: &Option<microsegnet::trainer::MeanStd>| v.as_ref().map_or("n/a".to_string(), |s| format!("{:.4} ± {:.4}", s.mean, s.std));
        println!("ratio {:>4}: dice {}, hd95 {}, hard {}", r.ratio, m(&r.dice), m(&r.hd95_mm), m(&r.hard_dice));
    }
    write_ablation_csv(&rows, Path::new("example_ablation.csv"))?;
    plot_ablation(&rows, Path::new("example_ablation.svg"))?;
    Ok(())
}
