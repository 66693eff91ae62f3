//! Subcommands and the files they write.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use rltrack_core::agents::train::{track, train};
use rltrack_core::env::{seed_points, PatchEncoder};
use rltrack_core::fodf_ae::{compression_ratio, train_ae};
use rltrack_core::io::{
    load_labeled, load_phantom, load_tractogram, save_labeled, save_phantom, save_tractogram, PHANTOM_INDEX,
};
use rltrack_core::irt::{irt_run, IrtDataset, IrtEnv};
use rltrack_core::oracle::{Split, TrainReport};
use rltrack_core::{
    make_phantom, score_tractogram, synth, Agent, Algorithm, Env, EnvConfig, Error, ExperimentConfig, FodfAe,
    LabeledSet, Oracle, ReplayBuffer, RewardConfig, StateMode, Tractogram,
};

pub type AgentF = Agent<f32>;

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Build a synthetic phantom and write it to a directory.
    Phantom(PhantomArgs),
    /// Train the streamline oracle on a labeled set or synthetic streamlines.
    TrainOracle(TrainOracleArgs),
    /// Train the fODF patch autoencoder on a phantom.
    TrainAe(TrainAeArgs),
    /// Train a tracking agent on a phantom.
    TrainAgent(TrainAgentArgs),
    /// Track a phantom with a trained agent.
    Track(TrackArgs),
    /// Score a tractogram against phantom ground truth.
    Score(ScoreArgs),
    /// Iterative reward training of agent and oracle.
    Irt(IrtArgs),
    /// Oracle accuracy and inference time for several resampling sizes.
    AblatePoints(AblateArgs),
    /// Rerun a recorded command and compare its outputs.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PhantomArgs {
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainOracleArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// labeled tractogram; synthetic streamlines when absent
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 20_000)]
    pub n_synthetic: usize,
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainAeArgs {
    #[arg(long)]
    pub phantom: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_patches: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainAgentArgs {
    #[arg(long)]
    pub phantom: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub algorithm: Option<Algorithm>,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// oracle checkpoint for the terminal bonus
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    /// autoencoder checkpoint; switches states to encoded patches
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    /// no oracle bonus, four previous directions in the state, discount 0.75
    #[arg(long)]
    pub track_to_learn: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrackArgs {
    #[arg(long)]
    pub phantom: PathBuf,
    #[arg(long)]
    pub agent: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    /// seeds per seeding voxel; the agent's training value when absent
    #[arg(long)]
    pub npv: Option<usize>,
    /// sample actions instead of taking the policy mean
    #[arg(long)]
    pub stochastic: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ScoreArgs {
    #[arg(long)]
    pub phantom: PathBuf,
    #[arg(long)]
    pub tractogram: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct IrtArgs {
    #[arg(long)]
    pub phantom: PathBuf,
    /// oracle checkpoint to start from
    #[arg(long)]
    pub oracle: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// agent checkpoint to start from; a fresh agent when absent
    #[arg(long)]
    pub agent: Option<PathBuf>,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    /// labeled tractogram that seeds the IRT dataset
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "32,64,128")]
    pub points: Vec<usize>,
    #[arg(long, default_value_t = 20_000)]
    pub n_synthetic: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// manifest file, or the output directory holding it
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Output directory that records what a command wrote.
pub struct OutDir {
    pub dir: PathBuf,
    pub files: Vec<String>,
    pub volatile: Vec<String>,
}

impl OutDir {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(OutDir {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            volatile: Vec::new(),
        })
    }

    pub fn file(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    /// A checkpoint and its `.json` sidecar.
    pub fn checkpoint(&mut self, name: &str) -> PathBuf {
        self.files.push(format!("{name}.json"));
        self.file(name)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(v)?;
        fs::write(self.file(name), text + "\n")?;
        Ok(())
    }

    pub fn write_timings<T: Serialize>(&mut self, v: &T) -> Result<()> {
        let name = crate::manifest::TIMINGS;
        self.volatile.push(name.to_string());
        self.write_json(name, v)
    }
}

/// Line-per-record JSON log.
struct JsonLines(fs::File);

impl JsonLines {
    fn create(path: &Path) -> Result<Self> {
        Ok(JsonLines(fs::File::create(path)?))
    }

    fn push<T: Serialize>(&mut self, v: &T) -> rltrack_core::Result<()> {
        let line = serde_json::to_string(v).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(self.0, "{line}")?;
        Ok(())
    }
}

/// Env and reward settings saved next to an agent checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentEnv {
    pub env: EnvConfig,
    pub reward: RewardConfig,
}

pub fn agent_env_path(agent: &Path) -> PathBuf {
    let mut p = agent.as_os_str().to_owned();
    p.push(".env.json");
    p.into()
}

fn save_agent(out: &mut OutDir, name: &str, agent: &AgentF, env: &EnvConfig, reward: &RewardConfig) -> Result<()> {
    let path = out.checkpoint(name);
    agent.save(&path)?;
    out.write_json(
        &format!("{name}.env.json"),
        &AgentEnv {
            env: env.clone(),
            reward: reward.clone(),
        },
    )
}

fn load_agent_env(agent: &Path) -> Result<AgentEnv> {
    let p = agent_env_path(agent);
    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    Ok(serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?)
}

fn load_encoder(path: Option<&PathBuf>) -> Result<Option<FodfAe>> {
    path.map(|p| FodfAe::load(p).with_context(|| format!("loading encoder {}", p.display())))
        .transpose()
}

fn check_encoder(env: &EnvConfig, encoder: &Option<FodfAe>) -> Result<()> {
    if env.state_mode == StateMode::Encoded && encoder.is_none() {
        return Err(Error::Config("encoded states need --encoder".into()).into());
    }
    Ok(())
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Phantom(_) => "phantom",
            Command::TrainOracle(_) => "train-oracle",
            Command::TrainAe(_) => "train-ae",
            Command::TrainAgent(_) => "train-agent",
            Command::Track(_) => "track",
            Command::Score(_) => "score",
            Command::Irt(_) => "irt",
            Command::AblatePoints(_) => "ablate-points",
            Command::Replay(_) => "replay",
        }
    }

    pub fn out_mut(&mut self) -> &mut PathBuf {
        match self {
            Command::Phantom(a) => &mut a.out,
            Command::TrainOracle(a) => &mut a.out,
            Command::TrainAe(a) => &mut a.out,
            Command::TrainAgent(a) => &mut a.out,
            Command::Track(a) => &mut a.out,
            Command::Score(a) => &mut a.out,
            Command::Irt(a) => &mut a.out,
            Command::AblatePoints(a) => &mut a.out,
            Command::Replay(a) => &mut a.out,
        }
    }

    /// Labeled input paths.
    pub fn inputs(&self) -> Vec<(&'static str, PathBuf)> {
        let mut v = Vec::new();
        let mut add = |k: &'static str, p: Option<&PathBuf>| {
            if let Some(p) = p {
                v.push((k, p.clone()));
            }
        };
        match self {
            Command::Phantom(_) | Command::AblatePoints(_) | Command::Replay(_) => {}
            Command::TrainOracle(a) => add("data", a.data.as_ref()),
            Command::TrainAe(a) => add("phantom", Some(&a.phantom)),
            Command::TrainAgent(a) => {
                add("phantom", Some(&a.phantom));
                add("oracle", a.oracle.as_ref());
                add("encoder", a.encoder.as_ref());
            }
            Command::Track(a) => {
                add("phantom", Some(&a.phantom));
                add("agent", Some(&a.agent));
                add("encoder", a.encoder.as_ref());
            }
            Command::Score(a) => {
                add("phantom", Some(&a.phantom));
                add("tractogram", Some(&a.tractogram));
            }
            Command::Irt(a) => {
                add("phantom", Some(&a.phantom));
                add("oracle", Some(&a.oracle));
                add("agent", a.agent.as_ref());
                add("encoder", a.encoder.as_ref());
                add("data", a.data.as_ref());
            }
        }
        v
    }

    /// Folds command-line overrides into the configuration.
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        match self {
            Command::TrainOracle(a) => {
                if let Some(p) = a.points {
                    cfg.oracle.n_points = p;
                }
                if let Some(e) = a.epochs {
                    cfg.oracle.epochs = e;
                }
            }
            Command::AblatePoints(a) => {
                if let Some(e) = a.epochs {
                    cfg.oracle.epochs = e;
                }
            }
            Command::TrainAe(a) => {
                if let Some(n) = a.n_patches {
                    cfg.ae_training.n_patches = n;
                }
                if let Some(e) = a.epochs {
                    cfg.ae_training.epochs = e;
                }
            }
            Command::TrainAgent(a) => {
                if let Some(alg) = a.algorithm {
                    cfg.agent.algorithm = alg;
                }
                if let Some(e) = a.episodes {
                    cfg.train.episodes = e;
                }
                if a.track_to_learn {
                    *cfg = cfg.clone().track_to_learn();
                }
                if a.encoder.is_some() {
                    cfg.env.state_mode = StateMode::Encoded;
                }
                if cfg.reward.oracle_bonus > 0.0 && a.oracle.is_none() {
                    return Err(Error::Config(
                        "reward.oracle_bonus > 0 needs --oracle (or --track-to-learn, or oracle_bonus = 0)".into(),
                    )
                    .into());
                }
            }
            Command::Irt(a) => {
                if let Some(n) = a.iters {
                    cfg.irt.n_iters = n;
                }
                if let Some(n) = a.warmup {
                    cfg.irt.warmup_episodes = n;
                }
                if a.encoder.is_some() {
                    cfg.env.state_mode = StateMode::Encoded;
                }
            }
            Command::Phantom(_) | Command::Track(_) | Command::Score(_) | Command::Replay(_) => {}
        }
        Ok(())
    }

    pub fn run(&self, cfg: &ExperimentConfig, out: &mut OutDir) -> Result<()> {
        match self {
            Command::Phantom(_) => run_phantom(cfg, out),
            Command::TrainOracle(a) => run_train_oracle(a, cfg, out),
            Command::TrainAe(a) => run_train_ae(a, cfg, out),
            Command::TrainAgent(a) => run_train_agent(a, cfg, out),
            Command::Track(a) => run_track(a, cfg, out),
            Command::Score(a) => run_score(a, out),
            Command::Irt(a) => run_irt(a, cfg, out),
            Command::AblatePoints(a) => run_ablate(a, cfg, out),
            Command::Replay(_) => bail!("replay is handled before dispatch"),
        }
    }
}

fn run_phantom(cfg: &ExperimentConfig, out: &mut OutDir) -> Result<()> {
    let spec = cfg.phantom.spec();
    let ph = make_phantom(&spec)?;
    save_phantom(&out.dir, &ph, Some(&spec))?;
    for name in ["volume.shv", "tracking.msk", "seeding.msk", PHANTOM_INDEX] {
        out.file(name);
    }
    for i in 0..ph.bundles.len() {
        for suffix in ["", "_head", "_tail"] {
            out.file(&format!("bundle{i}{suffix}.msk"));
        }
    }
    log::info!("phantom: {} bundles, dims {:?}", ph.bundles.len(), ph.dims());
    Ok(())
}

fn synthetic_or(data: Option<&PathBuf>, n: usize, seed: u64) -> Result<(LabeledSet, bool)> {
    match data {
        Some(p) => Ok((load_labeled(p).with_context(|| format!("loading {}", p.display()))?, false)),
        None => Ok((synth::labeled_set(n, seed)?, true)),
    }
}

fn run_train_oracle(a: &TrainOracleArgs, cfg: &ExperimentConfig, out: &mut OutDir) -> Result<()> {
    let (data, synthetic) = synthetic_or(a.data.as_ref(), a.n_synthetic, cfg.oracle.seed)?;
    if synthetic {
        save_labeled(&out.file("dataset.trx"), &data)?;
    }
    let mut oracle = Oracle::new(cfg.oracle.clone())?;
    let t0 = Instant::now();
    let report = oracle.train(&data)?;
    let secs = t0.elapsed().as_secs_f64();
    oracle.save(&out.checkpoint("oracle.nnck"))?;
    out.write_json("report.json", &report)?;
    out.write_timings(&serde_json::json!({ "train_seconds": secs }))?;
    log::info!("oracle test accuracy {:.4}", report.test.accuracy);
    Ok(())
}

#[derive(Serialize)]
struct AeSummary<'a> {
    #[serde(flatten)]
    report: &'a rltrack_core::fodf_ae::AeReport,
    n_params: usize,
    latent_len: usize,
    compression_ratio: f64,
}

fn run_train_ae(a: &TrainAeArgs, cfg: &ExperimentConfig, out: &mut OutDir) -> Result<()> {
    let ph = load_phantom(&a.phantom)?;
    let mut ae = FodfAe::new(cfg.ae.clone())?;
    let t0 = Instant::now();
    let report = train_ae(&mut ae, &ph, cfg.ae_training.n_patches, cfg.ae_training.epochs)?;
    let secs = t0.elapsed().as_secs_f64();
    ae.save(&out.checkpoint("ae.nnck"))?;
    out.write_json(
        "report.json",
        &AeSummary {
            report: &report,
            n_params: ae.n_params(),
            latent_len: rltrack_core::env::ENCODED_SIGNAL,
            compression_ratio: compression_ratio(),
        },
    )?;
    out.write_timings(&serde_json::json!({ "train_seconds": secs }))?;
    log::info!(
        "autoencoder held-out mse {:.6} (mean baseline {:.6})",
        report.heldout_mse,
        report.baseline_mse
    );
    Ok(())
}

fn build_env<'a>(
    ph: &'a rltrack_core::Phantom,
    env: &EnvConfig,
    reward: &RewardConfig,
    oracle: Option<&'a Oracle>,
    encoder: Option<&'a FodfAe>,
) -> Result<Env<'a>> {
    let mut e = Env::new(ph, env.clone(), reward.clone())?;
    if let Some(o) = oracle {
        e = e.with_oracle(o);
    }
    if let Some(enc) = encoder {
        e = e.with_encoder(enc);
    }
    Ok(e)
}

fn run_train_agent(a: &TrainAgentArgs, cfg: &ExperimentConfig, out: &mut OutDir) -> Result<()> {
    let ph = load_phantom(&a.phantom)?;
    let oracle = a.oracle.as_ref().map(|p| Oracle::load(p)).transpose()?;
    // a configured bonus without an oracle is rejected in `apply`
    let oracle = oracle.filter(|_| cfg.reward.oracle_bonus > 0.0);
    let encoder = load_encoder(a.encoder.as_ref())?;
    check_encoder(&cfg.env, &encoder)?;
    let env = build_env(&ph, &cfg.env, &cfg.reward, oracle.as_ref(), encoder.as_ref())?;
    let dim = cfg.env.state_len();
    let mut agent = AgentF::new(cfg.agent.clone(), dim)?;
    let mut buffer = ReplayBuffer::new(cfg.agent.buffer_capacity, dim)?;
    let mut log = JsonLines::create(&out.file("episodes.jsonl"))?;
    let t0 = Instant::now();
    train(&mut agent, &mut buffer, &env, &cfg.train, &mut |ep, _| log.push(ep))?;
    let secs = t0.elapsed().as_secs_f64();
    save_agent(out, "agent.nnck", &agent, &cfg.env, &cfg.reward)?;
    out.write_timings(&serde_json::json!({ "train_seconds": secs, "updates": agent.n_updates() }))?;
    Ok(())
}

fn run_track(a: &TrackArgs, cfg: &ExperimentConfig, out: &mut OutDir) -> Result<()> {
    let ph = load_phantom(&a.phantom)?;
    let agent = AgentF::load(&a.agent).with_context(|| format!("loading agent {}", a.agent.display()))?;
    let AgentEnv { mut env, mut reward } = load_agent_env(&a.agent)?;
    if let Some(n) = a.npv {
        env.npv = n;
    }
    reward.oracle_bonus = 0.0;
    let encoder = load_encoder(a.encoder.as_ref())?;
    check_encoder(&env, &encoder)?;
    let e = build_env(&ph, &env, &reward, None, encoder.as_ref().map(|x| x as &FodfAe))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.experiment.seed);
    let seeds = seed_points(&ph, env.npv, &mut rng)?;
    let t0 = Instant::now();
    let lines = track(&agent, &e, &seeds, a.stochastic, &mut rng)?;
    let secs = t0.elapsed().as_secs_f64();
    log::info!("tracked {} valid streamlines from {} seeds", lines.len(), seeds.len());
    save_tractogram(&out.file("tractogram.trx"), &Tractogram::new(lines))?;
    out.write_timings(&serde_json::json!({ "track_seconds": secs, "n_seeds": seeds.len() }))?;
    Ok(())
}

fn run_score(a: &ScoreArgs, out: &mut OutDir) -> Result<()> {
    let ph = load_phantom(&a.phantom)?;
    let t = load_tractogram(&a.tractogram)?;
    let report = score_tractogram(&t.streamlines, &ph);
    out.write_json("score.json", &report)?;
    fs::write(out.file("score.txt"), report.to_string())?;
    print!("{report}");
    Ok(())
}

fn run_irt(a: &IrtArgs, cfg: &ExperimentConfig, out: &mut OutDir) -> Result<()> {
    let ph = load_phantom(&a.phantom)?;
    let mut oracle = Oracle::load(&a.oracle)?;
    let encoder = load_encoder(a.encoder.as_ref())?;
    check_encoder(&cfg.env, &encoder)?;
    let dim = cfg.env.state_len();
    let mut agent = match &a.agent {
        Some(p) => {
            let ag = AgentF::load(p)?;
            if ag.state_dim != dim {
                return Err(Error::Config(format!(
                    "agent state size {} does not match the configured env ({dim})",
                    ag.state_dim
                ))
                .into());
            }
            ag
        }
        None => AgentF::new(cfg.agent.clone(), dim)?,
    };
    let mut buffer = ReplayBuffer::new(agent.cfg.buffer_capacity, dim)?;
    let mut dataset = match &a.data {
        Some(p) => IrtDataset::from_labeled(&load_labeled(p)?, cfg.irt.dataset_cap),
        None => IrtDataset::new(cfg.irt.dataset_cap),
    };
    let setup = IrtEnv {
        phantom: &ph,
        env: &cfg.env,
        reward: &cfg.reward,
        encoder: encoder.as_ref().map(|e| e as &dyn PatchEncoder),
    };
    let mut log = JsonLines::create(&out.file("iterations.jsonl"))?;
    let t0 = Instant::now();
    irt_run(&mut agent, &mut buffer, &mut oracle, &mut dataset, setup, &cfg.irt, &mut |it, _, _, _| {
        log.push(it)
    })?;
    let secs = t0.elapsed().as_secs_f64();
    oracle.save(&out.checkpoint("oracle.nnck"))?;
    save_agent(out, "agent.nnck", &agent, &cfg.env, &cfg.reward)?;
    save_labeled(&out.file("dataset.trx"), &dataset.to_labeled())?;
    out.write_timings(&serde_json::json!({ "irt_seconds": secs }))?;
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    n_points: usize,
    n_params: usize,
    test_accuracy: f64,
    report: TrainReport,
}

#[derive(Serialize)]
struct AblationTiming {
    n_points: usize,
    train_seconds: f64,
    /// scoring the test split once
    inference_seconds: f64,
    n_scored: usize,
}

fn run_ablate(a: &AblateArgs, cfg: &ExperimentConfig, out: &mut OutDir) -> Result<()> {
    if a.points.is_empty() {
        return Err(Error::InvalidArgument("--points is empty".into()).into());
    }
    let data = synth::labeled_set(a.n_synthetic, cfg.oracle.seed)?;
    let test: Vec<_> = data
        .indices(Split::Test)
        .into_iter()
        .map(|i| data.streamlines[i].clone())
        .collect();
    let mut rows = Vec::new();
    let mut timings = Vec::new();
    for &p in &a.points {
        let mut oc = cfg.oracle.clone();
        oc.n_points = p;
        let mut oracle = Oracle::new(oc)?;
        let t0 = Instant::now();
        let report = oracle.train(&data)?;
        let train_seconds = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        oracle.score(&test)?;
        let inference_seconds = t1.elapsed().as_secs_f64();
        log::info!(
            "{p} points: test accuracy {:.4}, inference {:.2}s",
            report.test.accuracy,
            inference_seconds
        );
        rows.push(AblationRow {
            n_points: p,
            n_params: oracle.n_params(),
            test_accuracy: report.test.accuracy,
            report,
        });
        timings.push(AblationTiming {
            n_points: p,
            train_seconds,
            inference_seconds,
            n_scored: test.len(),
        });
    }
    out.write_json("ablation.json", &rows)?;
    out.write_timings(&timings)?;
    Ok(())
}
