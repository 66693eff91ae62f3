//! `rltrack`: phantoms, oracle and agent training, tracking, scoring.
//!
//! Every command writes `manifest.json` into its output directory, and
//! `rltrack replay` reruns a manifest and compares output hashes.

mod commands;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;

use commands::{Command, OutDir};
use manifest::{diff, hash_input, hash_outputs, sha256_bytes, Manifest};
use rltrack_core::{Error, ExperimentConfig};

#[derive(Debug, Parser)]
#[command(name = "rltrack", version, about = "Reinforcement-learning tractography on synthetic phantoms")]
struct Cli {
    /// TOML experiment configuration; defaults when absent
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// master seed, copied into every seeded section
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// worker threads; 0 lets rayon decide
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

/// Replayed outputs differ from the recorded ones.
#[derive(Debug, thiserror::Error)]
#[error("replay mismatch in {0:?}")]
struct ReplayMismatch(Vec<String>);

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<ReplayMismatch>().is_some() {
        return 5;
    }
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Config(_) | Error::Spec(_) | Error::InvalidArgument(_) => 2,
                Error::Io(_) | Error::Format(_) => 3,
                Error::Numeric(_) | Error::DegenerateInput(_) => 4,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<serde_json::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

/// Applies overrides, runs the command, and writes its manifest.
fn execute(cmd: &Command, mut cfg: ExperimentConfig, out_dir: &Path) -> Result<Manifest> {
    cmd.apply(&mut cfg)?;
    cfg.validate()?;
    let mut inputs = Default::default();
    for (label, path) in cmd.inputs() {
        hash_input(label, &path, &mut inputs).with_context(|| format!("hashing input {}", path.display()))?;
    }
    let config = cfg.to_toml()?;
    let mut out = OutDir::create(out_dir)?;
    cmd.run(&cfg, &mut out)?;
    let mut outputs = hash_outputs(&out.dir, &out.volatile)?;
    outputs.retain(|k, _| out.files.contains(k));
    let m = Manifest {
        command: cmd.name().to_string(),
        args: serde_json::to_value(cmd)?,
        config_sha256: sha256_bytes(config.as_bytes()),
        config,
        seed: cfg.experiment.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        threads: rayon::current_num_threads(),
        inputs,
        outputs,
        volatile: out.volatile.clone(),
        desk_overrides: cfg.desk_overrides_in_effect().into_iter().map(String::from).collect(),
    };
    m.save(&out.dir)?;
    Ok(m)
}

fn replay(manifest: &Path, out: &Path) -> Result<()> {
    let rec = Manifest::load(manifest)?;
    let mut cmd: Command = serde_json::from_value(rec.args.clone()).context("manifest arguments")?;
    if matches!(cmd, Command::Replay(_)) {
        return Err(Error::InvalidArgument("cannot replay a replay".into()).into());
    }
    if sha256_bytes(rec.config.as_bytes()) != rec.config_sha256 {
        return Err(Error::Format("manifest config does not match its hash".into()).into());
    }
    let cfg = ExperimentConfig::from_toml(&rec.config)?;
    let mut now = Default::default();
    for (label, path) in cmd.inputs() {
        hash_input(label, &path, &mut now)?;
    }
    let changed = diff(&rec.inputs, &now);
    if !changed.is_empty() {
        return Err(Error::InvalidArgument(format!("inputs changed since the recorded run: {changed:?}")).into());
    }
    *cmd.out_mut() = out.to_path_buf();
    let m = execute(&cmd, cfg, out)?;
    let bad = diff(&rec.outputs, &m.outputs);
    if !bad.is_empty() {
        return Err(ReplayMismatch(bad).into());
    }
    println!(
        "replay of {}: {} outputs identical ({} threads, recorded with {})",
        rec.command,
        m.outputs.len(),
        m.threads,
        rec.threads
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .context("building the thread pool")?;
    }
    match &cli.command {
        Command::Replay(a) => replay(&a.manifest, &a.out),
        cmd => {
            let cfg = load_config(cli.config.as_deref(), cli.seed)?;
            let mut cmd = cmd.clone();
            let out = cmd.out_mut().clone();
            execute(&cmd, cfg, &out)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
