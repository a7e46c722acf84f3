//! Build the tiny network and run one forward pass, stage by stage.

use microsegnet::config::ModelConfig;
use microsegnet::model::MicroSegNet;
use microsegnet::nn::Module;
use microsegnet::synthdata::{generate_slice, preprocess, SynthParams};

fn main() -> microsegnet::Result<()> {
    let cfg = ModelConfig::tiny();
    let model = MicroSegNet::<f32>::new(&cfg, 0)?;
    println!("{} preset: {} parameters, {} tokens of width {}", cfg.preset_name, model.num_params(), cfg.num_tokens(), cfg.embed_dim);

    let rec = generate_slice(&SynthParams::default(), 0, 0)?;
    let img = preprocess(&rec.image, cfg.input_size)?;
    let x = MicroSegNet::<f32>::input_tensor(&img);
    let stem = model.conv_stem(&x)?;
    for (k, s) in stem.skips.iter().enumerate() {
        println!("skip 1/{}: {:?}", 2 << k, s.shape);
    }
    let z0 = model.patch_embed(stem.deep())?;
    let z = model.transformer_encoder(&z0)?;
    println!("tokens {:?} on a {:?} grid", z.tokens.shape, z.grid);

    let t = std::time::Instant::now();
    let pred = model.forward(&img, true)?;
    println!("forward in {:?}", t.elapsed());
    for (name, p) in [("P1", Some(&pred.p1)), ("P2", pred.p2.as_ref()), ("P3", pred.p3.as_ref()), ("P4", pred.p4.as_ref())] {
        let p = p.expect("deep supervision on");
        let mean = p.probs.iter().sum::<f64>() / p.probs.len() as f64;
        println!("{name}: {:?}, mean probability {mean:.4}", p.shape());
    }
    Ok(())
}
