//! Command-line driver for staged cVMD runs.
//!
//! Configuration keys can be overridden on any subcommand with
//! `--section.key=value`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cvmd::eval::ablation_table;
use cvmd::pipeline::{self, GuidanceScale, Run, RunConfig};
use cvmd::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "cvmd", version, about = "Conditioned vehicle motion diffusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct RunArg {
    /// Run directory created by `prepare`.
    #[arg(long)]
    run: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Create a run directory and build its dataset.
    Prepare {
        /// JSON configuration; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory new runs are created under.
        #[arg(long, env = pipeline::RUN_ROOT_ENV, default_value = "runs")]
        run_root: PathBuf,
        /// Run directory name; a timestamped name is used otherwise.
        #[arg(long)]
        name: Option<String>,
    },
    /// Train the context VQ-VAE.
    TrainVqvae(RunArg),
    /// Train the conditional denoiser on the frozen VQ-VAE's conditions.
    TrainDiffusion(RunArg),
    /// Fit per-entry latent statistics.
    FitUq(RunArg),
    /// Predict the test split.
    Predict(RunArg),
    /// Score stored predictions against the dataset.
    Evaluate(RunArg),
    /// Predict the test split once per guidance scale.
    Ablate {
        #[command(flatten)]
        run: RunArg,
        /// Comma-separated guidance scales, numbers or `uc`; defaults to the
        /// configured list.
        #[arg(long, value_delimiter = ',')]
        w: Vec<GuidanceScale>,
    },
}

/// Separates `--section.key=value` overrides from ordinary arguments.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let mut plain = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        let key = a.strip_prefix("--").and_then(|r| r.split_once('=')).map(|(k, _)| k);
        if key.is_some_and(|k| k.contains('.') || k == "seed") {
            overrides.push(a[2..].to_string());
        } else {
            plain.push(a);
        }
    }
    (plain, overrides)
}

fn fresh_run_dir(root: &Path, name: Option<String>) -> PathBuf {
    if let Some(n) = name {
        return root.join(n);
    }
    let stamp = chrono::Local::now().format("run-%Y%m%d-%H%M%S").to_string();
    let mut dir = root.join(&stamp);
    let mut i = 2;
    while dir.exists() {
        dir = root.join(format!("{stamp}-{i}"));
        i += 1;
    }
    dir
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).unwrap_or_default()
}

fn execute(cmd: Command, overrides: &[String]) -> Result<()> {
    match cmd {
        Command::Prepare { config, run_root, name } => {
            let text = match &config {
                Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
                None => None,
            };
            let cfg = RunConfig::resolve(text.as_deref(), overrides)?;
            let dir = fresh_run_dir(&run_root, name);
            let run = Run::create(&dir, cfg)?;
            let m = pipeline::prepare(&run)?;
            let train = m.samples.iter().filter(|s| s.split == cvmd::scenario::SplitName::Train).count();
            eprintln!("prepared {} samples ({} train, {} test)", m.samples.len(), train, m.samples.len() - train);
            println!("{}", dir.display());
        }
        Command::TrainVqvae(r) => {
            let s = pipeline::train_vqvae_stage(&Run::open(&r.run, overrides)?)?;
            println!("{}", json(&s));
        }
        Command::TrainDiffusion(r) => {
            let s = pipeline::train_diffusion_stage(&Run::open(&r.run, overrides)?)?;
            println!("{}", json(&s));
        }
        Command::FitUq(r) => {
            let s = pipeline::fit_uq_stage(&Run::open(&r.run, overrides)?)?;
            println!("{}", json(&s));
        }
        Command::Predict(r) => {
            let out = pipeline::predict_stage(&Run::open(&r.run, overrides)?)?;
            for f in &out.failures {
                eprintln!("sample {}: {}", f.sample_id, f.error);
            }
            println!("predicted {} samples with w={} ({} failed)", out.reports.len(), out.w, out.failures.len());
        }
        Command::Evaluate(r) => {
            let s = pipeline::evaluate_stage(&Run::open(&r.run, overrides)?)?;
            print!("{}", pipeline::summary_text(&s));
        }
        Command::Ablate { run, w } => {
            let run = Run::open(&run.run, overrides)?;
            let scales = if w.is_empty() { run.config.evaluation.ablation_w.clone() } else { w };
            let rows = pipeline::ablate_stage(&run, &scales)?;
            print!("{}", ablation_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let (plain, overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(plain) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli.command, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
