//! Presets and the flat `key = value` config file.

use microsegnet::config::{ModelConfig, RunConfig};

fn main() -> microsegnet::Result<()> {
    for name in ["tiny", "paper"] {
        let m = ModelConfig::preset(name)?;
        println!("{name}: D={} L={} heads={} stem={:?} tokens={}", m.embed_dim, m.num_layers, m.num_heads, m.stem_widths(), m.num_tokens());
    }
    let cfg = RunConfig::from_toml_str(
        "preset_name = \"tiny\"\ninput_size = 96\nw_hard = 8\ndeep_supervision = false\nlr_schedule = \"cosine\"\n",
    )?;
    print!("{}", cfg.to_toml_string()?);
    match RunConfig::from_toml_str("w_hard = 0.5") {
        Err(e) => println!("rejected: {e}"),
        Ok(_) => unreachable!("w_hard below w_easy must be refused"),
    }
    Ok(())
}
