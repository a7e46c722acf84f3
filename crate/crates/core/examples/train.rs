//! Train the tiny network on a small 64×64 dataset and save a checkpoint.
//!
//! `cargo run --release --example train -- [OUT_DIR]`

use std::path::PathBuf;

use microsegnet::config::{ModelConfig, TrainConfig};
use microsegnet::synthdata::{generate_dataset, PerturbParams, SynthParams};
use microsegnet::trainer::train;

fn main() -> microsegnet::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "example_run".into()));
    let params = SynthParams {
        num_cases: 10,
        slices_per_case: 2,
        image_size: 64,
        ..SynthParams::default()
    };
    let ds = generate_dataset(&params, &PerturbParams::default(), 2)?;
    let model = ModelConfig {
        input_size: 64,
        ..ModelConfig::tiny()
    };
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let outcome = train(&model, &cfg, &ds)?;
    for e in &outcome.log.epochs {
        println!("epoch {:>2}: loss {:.4}, val dice {:?}", e.epoch, e.mean_loss, e.val_dice.map(|d| (d * 1e4).round() / 1e4));
    }
    println!("train {:?}, val {:?}", outcome.train_cases, outcome.val_cases);
    std::fs::create_dir_all(&out).map_err(|e| microsegnet::Error::io(&out, e))?;
    outcome.checkpoint.save(&out.join("model.ckpt"))?;
    outcome.log.write_steps_csv(&out.join("train_log.csv"))?;
    outcome.log.write_epochs_csv(&out.join("epochs.csv"))?;
    println!("checkpoint written to {}", out.join("model.ckpt").display());
    Ok(())
}
