use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use microsegnet::checkpoint::Checkpoint;
use microsegnet::config::{RunConfig, StemMode};
use microsegnet::eval::{evaluate, write_overlays, write_patient_csv, write_slice_csv, EvalOptions};
use microsegnet::experiments::{
    ablate_weight_ratio, compare_variants, plot_ablation, write_ablation_csv, write_comparison_csv, Variant,
    DEFAULT_RATIOS,
};
use microsegnet::metrics::PercentileMode;
use microsegnet::report::{self, ArtifactManifest};
use microsegnet::synthdata::{self, generate_dataset, load_dataset, PerturbParams, Split, SynthParams};
use microsegnet::trainer::train;
use microsegnet::{Error, Result};

#[derive(Parser)]
#[command(name = "microsegnet", version, about = "Annotation-guided deep-supervised segmentation on synthetic micro-ultrasound")]
struct Cli {
    /// Seed (data generation, or the first training run).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output location: a directory, or the checkpoint file for `train`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenData),
    /// Derive hard-region masks for a dataset in place.
    HardMask {
        #[arg(long, visible_alias = "dataset")]
        data: PathBuf,
        /// Grow the disagreement region by this many pixels.
        #[arg(long, default_value_t = 0)]
        dilate_px: usize,
    },
    /// Train one model.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Where logs go; defaults to the checkpoint's directory.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// HD95 over the pooled distance set instead of the max of both directions.
        #[arg(long)]
        pooled: bool,
        /// Number of overlay images to render.
        #[arg(long, default_value_t = 4)]
        overlays: usize,
    },
    /// Sweep the hard/easy weight ratio.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated ratios.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        /// Runs per ratio (default: num_runs from the config).
        #[arg(long)]
        runs: Option<usize>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Compare training variants (plain, deep-supervision, microsegnet).
    Compare {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "plain,deep-supervision,microsegnet")]
        variants: Vec<String>,
        #[arg(long)]
        runs: Option<usize>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Render report.md from the CSV artifacts of a run directory.
    Report {
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct GenData {
    #[arg(long, visible_alias = "cases", default_value_t = 40)]
    num_cases: usize,
    #[arg(long, default_value_t = 6)]
    slices_per_case: usize,
    #[arg(long, default_value_t = 10)]
    test_cases: usize,
    #[arg(long, default_value_t = 224)]
    image_size: usize,
    #[arg(long, default_value_t = 0.5)]
    shape_irregularity: f64,
    #[arg(long, default_value_t = 0.3)]
    artifact_density: f64,
    #[arg(long, default_value_t = 0.5)]
    noise_level: f64,
    /// Non-expert boundary displacement, in pixels.
    #[arg(long, default_value_t = 2.0)]
    amplitude_px: f64,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    no_deep_supervision: bool,
    #[arg(long)]
    w_hard: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    stem: Option<StemMode>,
    /// Any config key, e.g. `--set batch_size=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn load_config(path: Option<&Path>, seed: Option<u64>, o: &Overrides) -> Result<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    let mut set = |k: &str, v: toml::Value| {
        table.insert(k.to_string(), v);
    };
    if let Some(p) = &o.preset {
        set("preset_name", p.clone().into());
    }
    if let Some(s) = seed {
        set("seed", (s as i64).into());
    }
    if o.no_deep_supervision {
        set("deep_supervision", false.into());
    }
    if let Some(w) = o.w_hard {
        set("w_hard", w.into());
    }
    if let Some(e) = o.epochs {
        set("epochs", (e as i64).into());
    }
    if let Some(n) = o.input_size {
        set("input_size", (n as i64).into());
    }
    if let Some(s) = o.stem {
        set("stem", if s == StemMode::Pure { "pure" } else { "hybrid" }.into());
    }
    for kv in &o.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        // parse the value as a TOML scalar; bare words are strings
        let parsed = format!("v = {}", v.trim())
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| v.trim().to_string().into());
        set(k.trim(), parsed);
    }
    RunConfig::from_table(&table)
}

fn out_dir(cli_out: &Option<PathBuf>, default: &str) -> PathBuf {
    cli_out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::InvalidParam(format!("unknown split {other:?}"))),
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(g) => {
            let out = out_dir(&cli.out, "data");
            let synth = SynthParams {
                num_cases: g.num_cases,
                slices_per_case: g.slices_per_case,
                image_size: g.image_size,
                shape_irregularity: g.shape_irregularity,
                artifact_density: g.artifact_density,
                noise_level: g.noise_level,
                seed: cli.seed.unwrap_or(SynthParams::default().seed),
                ..SynthParams::default()
            };
            let annot = PerturbParams {
                amplitude_px: g.amplitude_px,
                ..PerturbParams::default()
            };
            let ds = generate_dataset(&synth, &annot, g.test_cases)?;
            let s = synthdata::write_dataset(&ds, &out)?;
            println!(
                "wrote {} slices ({} train / {} test patients) to {}",
                s.slices,
                s.train_cases,
                s.test_cases,
                out.display()
            );
        }
        Command::HardMask { data, dilate_px } => {
            let fractions = synthdata::write_hard_masks(data, *dilate_px)?;
            let dir = cli.out.clone().unwrap_or_else(|| data.clone());
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let path = dir.join("hard_fraction.csv");
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["case_id", "slice_index", "hard_fraction"])?;
            for f in &fractions {
                w.write_record([f.case_id.clone(), f.slice_index.to_string(), format!("{:.6}", f.hard_fraction)])?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            println!("wrote {} hard masks; fractions in {}", fractions.len(), path.display());
        }
        Command::Train {
            data,
            overrides,
            run_dir,
        } => {
            let cfg = load_config(cli.config.as_deref(), cli.seed, overrides)?;
            let ckpt = cli.out.clone().unwrap_or_else(|| PathBuf::from("run/model.ckpt"));
            let dir = run_dir
                .clone()
                .or_else(|| ckpt.parent().map(Path::to_path_buf))
                .filter(|d| !d.as_os_str().is_empty())
                .unwrap_or_else(|| PathBuf::from("."));
            let ds = load_dataset(data)?;
            let out = train(&cfg.model, &cfg.train, &ds)?;
            out.checkpoint.save(&ckpt)?;
            let steps = dir.join(report::TRAIN_LOG);
            let epochs = dir.join(report::EPOCH_LOG);
            out.log.write_steps_csv(&steps)?;
            out.log.write_epochs_csv(&epochs)?;
            let cfg_path = dir.join("config.toml");
            std::fs::write(&cfg_path, cfg.to_toml_string()?).map_err(|e| Error::io(&cfg_path, e))?;
            ArtifactManifest::record(
                &dir,
                &[
                    ("checkpoint", ckpt.as_path()),
                    ("train_log", steps.as_path()),
                    ("epoch_log", epochs.as_path()),
                    ("config", cfg_path.as_path()),
                ],
            )?;
            if let Some(last) = out.log.epochs.last() {
                println!("final epoch loss {:.5}; checkpoint {}", last.mean_loss, ckpt.display());
            }
        }
        Command::Evaluate {
            checkpoint,
            data,
            split,
            threshold,
            pooled,
            overlays,
        } => {
            let ck = Checkpoint::load(checkpoint)?;
            if let Some(p) = &cli.config {
                ck.check_config(&RunConfig::load(p)?.model)?;
            }
            let ds = load_dataset(data)?;
            let split = parse_split(split)?;
            let opts = EvalOptions {
                threshold: *threshold,
                mode: if *pooled { PercentileMode::Pooled } else { PercentileMode::Directed },
            };
            let rep = evaluate(&ck.model, &ds, split, opts)?;
            let dir = out_dir(&cli.out, "run");
            let slices = dir.join(report::SLICE_METRICS);
            let patients = dir.join(report::PATIENT_METRICS);
            write_slice_csv(&rep, &slices)?;
            write_patient_csv(&rep, &patients)?;
            let ov = dir.join(report::OVERLAY_DIR);
            write_overlays(&ck.model, &ds, split, *threshold, *overlays, &ov)?;
            ArtifactManifest::record(
                &dir,
                &[
                    ("slice_metrics", slices.as_path()),
                    ("patient_metrics", patients.as_path()),
                    ("overlays", ov.as_path()),
                ],
            )?;
            println!(
                "{} patients: dice {:.4}, hd95 {} mm (threshold {threshold})",
                rep.patients.len(),
                rep.mean_dice,
                rep.mean_hd95_mm.map_or("n/a".into(), |v| format!("{v:.3}"))
            );
        }
        Command::Ablate {
            data,
            ratios,
            runs,
            overrides,
        } => {
            let cfg = load_config(cli.config.as_deref(), cli.seed, overrides)?;
            let ds = load_dataset(data)?;
            let ratios = ratios.clone().unwrap_or_else(|| DEFAULT_RATIOS.to_vec());
            let runs = runs.unwrap_or(cfg.train.num_runs);
            let rows = ablate_weight_ratio(&ratios, &cfg.model, &cfg.train, &ds, runs, EvalOptions::default())?;
            let dir = out_dir(&cli.out, "run");
            let csv = dir.join(report::ABLATION);
            let svg = dir.join(report::ABLATION_PLOT);
            write_ablation_csv(&rows, &csv)?;
            plot_ablation(&rows, &svg)?;
            ArtifactManifest::record(&dir, &[("ablation", csv.as_path()), ("ablation_plot", svg.as_path())])?;
            for r in &rows {
                println!(
                    "ratio {:>5}: dice {}{}",
                    r.ratio,
                    r.dice.as_ref().map_or("n/a".into(), |m| format!("{:.4} ± {:.4}", m.mean, m.std)),
                    if r.complete() { "" } else { " (incomplete)" }
                );
            }
        }
        Command::Compare {
            data,
            variants,
            runs,
            overrides,
        } => {
            let cfg = load_config(cli.config.as_deref(), cli.seed, overrides)?;
            let ds = load_dataset(data)?;
            let variants = variants
                .iter()
                .map(|v| match v.as_str() {
                    "plain" => Ok(Variant::plain()),
                    "deep-supervision" => Ok(Variant::deep_supervision_only()),
                    "microsegnet" => Ok(Variant::full()),
                    other => Err(Error::InvalidParam(format!("unknown variant {other:?}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            let runs = runs.unwrap_or(cfg.train.num_runs);
            let rows = compare_variants(&ds, &variants, &cfg.model, &cfg.train, runs, EvalOptions::default())?;
            let dir = out_dir(&cli.out, "run");
            let csv = dir.join(report::COMPARISON);
            write_comparison_csv(&rows, &csv)?;
            ArtifactManifest::record(&dir, &[("comparison", csv.as_path())])?;
            for r in &rows {
                println!(
                    "{:<18} dice {} hard {}",
                    r.variant.name,
                    r.report.dice.as_ref().map_or("n/a".into(), |m| format!("{:.4}", m.mean)),
                    r.report.hard_dice.as_ref().map_or("n/a".into(), |m| format!("{:.4}", m.mean)),
                );
            }
        }
        Command::Report { run_dir } => {
            let dir = run_dir.clone().unwrap_or_else(|| out_dir(&cli.out, "run"));
            let out = report::report(&dir)?;
            ArtifactManifest::record(&dir, &[("report", out.path.as_path())])?;
            println!("wrote {}", out.path.display());
            for m in &out.missing {
                println!("missing: {m}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
