//! `glgan`: train, analyze, evaluate and ablate patch-discriminator GANs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use glgan::ablation;
use glgan::data::Dataset;
use glgan::patchmetrics;
use glgan::trainer::eval;
use glgan::{DispersionReport, Error, TrainConfig, Trainer};

const OUT_ENV: &str = "GLGAN_OUT";

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(name = "glgan", version, about = "Adaptive global/local GAN training with patch discriminators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator/discriminator pair.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from a checkpoint; its stored configuration is used and
        /// logs in the output directory are appended to.
        #[arg(long, value_name = "CKPT", conflicts_with_all = ["config", "set", "seed"])]
        resume: Option<PathBuf>,
    },
    /// Write per-sample score heatmaps and print the dispersion report.
    Analyze {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Output directory; defaults to `analysis/` beside the checkpoint.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Print proxy metrics of a checkpoint's generator.
    Evaluate {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        /// Images per set; defaults to the checkpoint's `eval_samples`.
        #[arg(long)]
        samples: Option<usize>,
        /// Also write the report to `DIR/eval.txt`.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Train every configured variant and print a comparison table.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Run variants on separate threads.
        #[arg(long)]
        parallel: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Configuration file of `key = value` lines under `[section]` headers.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one key after the file is read; repeatable, last one wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

/// A fully resolved configuration plus the overrides that produced it.
struct Resolved {
    config: TrainConfig,
    overrides: Vec<(String, String)>,
    source: Option<PathBuf>,
}

fn split_override(s: &str) -> anyhow::Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not of the form key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn resolve(args: &RunArgs) -> anyhow::Result<Resolved> {
    let mut config = TrainConfig::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        config
            .apply_text(&text)
            .with_context(|| format!("in config file {}", path.display()))?;
    }
    let mut overrides = args.set.iter().map(|s| split_override(s)).collect::<anyhow::Result<Vec<_>>>()?;
    for (key, value, flag) in [
        ("seed", args.seed.map(|s| s.to_string()), "--seed"),
        ("out_dir", args.out.as_ref().map(|p| p.display().to_string()), "--out"),
    ] {
        let Some(value) = value else { continue };
        if let Some((_, set)) = overrides.iter().rev().find(|(k, _)| k == key) {
            if *set != value {
                return Err(Error::Config(format!("{flag} {value} conflicts with --set {key}={set}")).into());
            }
        }
        overrides.push((key.to_string(), value));
    }
    for (k, v) in &overrides {
        config.set(k, v)?;
    }
    if config.out_dir == TrainConfig::default().out_dir {
        if let Some(root) = std::env::var_os(OUT_ENV) {
            config.out_dir = PathBuf::from(root).join("default");
        }
    }
    config.validate()?;
    Ok(Resolved {
        config,
        overrides,
        source: args.config.clone(),
    })
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// The manifest is itself a valid configuration file: metadata lives in
/// comments, so `train --config manifest.cfg` repeats the run.
fn manifest_text(r: &Resolved, command: &str, started: u64, finished: Option<u64>) -> String {
    let c = &r.config;
    let mut s = String::new();
    let _ = writeln!(s, "# glgan {} {command}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "# seed: {}", c.seed);
    let _ = writeln!(s, "# started (unix seconds): {started}");
    if let Some(f) = finished {
        let _ = writeln!(s, "# finished (unix seconds): {f}");
    }
    if let Some(src) = &r.source {
        let _ = writeln!(s, "# config file: {}", src.display());
    }
    for (k, v) in &r.overrides {
        let _ = writeln!(s, "# override: {k}={v}");
    }
    let out = &c.out_dir;
    for (what, p) in [
        ("output", out.clone()),
        ("metrics", out.join("metrics.csv")),
        ("decisions", out.join("decisions.csv")),
        ("checkpoints", out.join("checkpoints")),
        ("samples", out.join("samples")),
        ("final checkpoint", out.join("final.ckpt")),
    ] {
        let _ = writeln!(s, "# {what}: {}", p.display());
    }
    s.push('\n');
    s.push_str(&c.to_text());
    s
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn load_dataset(c: &TrainConfig) -> anyhow::Result<Arc<Dataset>> {
    let ds = Dataset::from_source(&c.data_source()?, c.resolution, c.channels)?;
    if !ds.skipped.is_empty() {
        log::warn!("{} unreadable images skipped", ds.skipped.len());
    }
    Ok(Arc::new(ds))
}

fn cmd_train(run: &RunArgs, resume: Option<&Path>) -> anyhow::Result<()> {
    if let Some(ckpt) = resume {
        let mut trainer = Trainer::load(ckpt)?;
        let out = run.out.clone().unwrap_or_else(|| trainer.config().out_dir.clone());
        trainer.attach_output(&out, true)?;
        log::info!("resuming at step {} of {}", trainer.step_count(), trainer.total_steps());
        trainer.train()?;
        println!("finished step {}; final checkpoint {}", trainer.step_count(), out.join("final.ckpt").display());
        return Ok(());
    }
    let resolved = resolve(run)?;
    let out = resolved.config.out_dir.clone();
    let manifest = out.join("manifest.cfg");
    let started = unix_now();
    write_file(&manifest, &manifest_text(&resolved, "train", started, None))?;
    let mut trainer = Trainer::new(resolved.config.clone(), load_dataset(&resolved.config)?)?;
    trainer.attach_output(&out, false)?;
    log::info!("training {} steps into {}", trainer.total_steps(), out.display());
    trainer.train()?;
    write_file(&manifest, &manifest_text(&resolved, "train", started, Some(unix_now())))?;
    println!("finished step {}; final checkpoint {}", trainer.step_count(), out.join("final.ckpt").display());
    Ok(())
}

fn format_report(r: &DispersionReport) -> String {
    let join = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(" ");
    format!(
        "mu = {}\nsigma = {}\nsigma_bar = {}\nmu_k = {}\nsigma_k = {}\n",
        r.mu,
        r.sigma_global,
        r.sigma_local_bar,
        join(&r.mu_k),
        join(&r.sigma_k)
    )
}

fn cmd_analyze(checkpoint: &Path, count: usize, out: Option<&Path>) -> anyhow::Result<()> {
    let config = Trainer::checkpoint_config(checkpoint)?;
    if config.side < 2 {
        return Err(Error::Config(format!(
            "heatmaps need a discriminator feature map of side ≥ 2; {} has side {}",
            checkpoint.display(),
            config.side
        ))
        .into());
    }
    if count == 0 {
        return Err(Error::Config("--count must be at least 1".into()).into());
    }
    let mut trainer = Trainer::load(checkpoint)?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| {
        checkpoint.parent().unwrap_or(Path::new(".")).join("analysis")
    });
    let z = trainer.fixed_noise(count);
    let images = eval::generate(trainer.generator_mut(), &z)?;
    let scores = trainer.score(&images)?;
    for k in 0..count {
        patchmetrics::export_heatmap(&scores, k, &images, &out.join(format!("heatmap_{k}.png")))?;
    }
    let report = format_report(&DispersionReport::from_map(&scores));
    write_file(&out.join("report.txt"), &report)?;
    print!("{report}");
    println!("wrote {count} heatmaps to {}", out.display());
    Ok(())
}

fn cmd_evaluate(checkpoint: &Path, samples: Option<usize>, out: Option<&Path>) -> anyhow::Result<()> {
    let mut trainer = Trainer::load(checkpoint)?;
    let n = samples.unwrap_or(trainer.config().eval_samples);
    let report = trainer.evaluate(n)?.to_text();
    if let Some(dir) = out {
        write_file(&dir.join("eval.txt"), &report)?;
    }
    print!("step = {}\n{report}", trainer.step_count());
    Ok(())
}

fn cmd_ablate(run: &RunArgs, parallel: bool) -> anyhow::Result<()> {
    let resolved = resolve(run)?;
    let c = &resolved.config;
    let variants = ablation::parse_variants(&c.variants)?;
    let seeds = c.seed_list()?;
    let started = unix_now();
    let manifest = c.out_dir.join("manifest.cfg");
    write_file(&manifest, &manifest_text(&resolved, "ablate", started, None))?;
    let rows = ablation::run_ablation(c, &variants, &seeds, load_dataset(c)?, true, parallel);
    let table = ablation::format_table(&rows);
    write_file(&c.out_dir.join("ablation.csv"), &table)?;
    write_file(&manifest, &manifest_text(&resolved, "ablate", started, Some(unix_now())))?;
    print!("{table}");
    if !ablation::shares_data(&rows) {
        bail!("variants consumed different data batches");
    }
    let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
    if failed > 0 {
        bail!("{failed} of {} variants failed", rows.len());
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_)) => EXIT_CONFIG,
        Some(Error::Io { .. } | Error::Image { .. } | Error::Checkpoint(_)) => EXIT_IO,
        Some(Error::NonFinite { .. }) => EXIT_NUMERIC,
        _ => EXIT_OTHER,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { run, resume } => cmd_train(run, resume.as_deref()),
        Command::Analyze { checkpoint, count, out } => cmd_analyze(checkpoint, *count, out.as_deref()),
        Command::Evaluate { checkpoint, samples, out } => cmd_evaluate(checkpoint, *samples, out.as_deref()),
        Command::Ablate { run, parallel } => cmd_ablate(run, *parallel),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // library errors already embed their source in the message
            let mut parts = Vec::new();
            for cause in e.chain() {
                parts.push(cause.to_string());
                if cause.downcast_ref::<Error>().is_some() {
                    break;
                }
            }
            eprintln!("error: {}", parts.join(": "));
            ExitCode::from(exit_code(&e))
        }
    }
}
