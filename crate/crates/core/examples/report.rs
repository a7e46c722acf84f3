//! Assemble a Markdown report from whatever artifacts a run directory holds.
//!
//! `cargo run --example report -- RUN_DIR` (e.g. the directory written by the
//! `train` example); missing artifacts become stubs.

use std::path::PathBuf;

use microsegnet::report::report;

fn main() -> microsegnet::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "example_run".into()));
    let out = report(&dir)?;
    println!("wrote {}", out.path.display());
    for m in &out.missing {
        println!("missing: {m}");
    }
    Ok(())
}
