//! Run configuration and the `train`, `eval`, `sweep-rho` and `bench`
//! drivers behind the command line.
//!
//! A configuration file is TOML. Only `scenario.carrier_frequency` is
//! required; every other key defaults to the full-size preset, or to the
//! desk-scale preset when `desk_scale = true`. The fully resolved
//! configuration is written next to every run's outputs and loads back to
//! the same values.
//!
//! Each seed fixes both the channel draws and the agent's initialization, so
//! policies trained on the same seed see the same episodes. Per-seed
//! outputs go to `seed_<n>/` and are merged in seed order.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::agent::{Ddpg, DdpgConfig, Policy, CHECKPOINT_FILE};
use crate::baselines::{Dqn, DqnConfig, MrtPolicy, RandomPolicy};
use crate::env::{feature_len, Env, EnvConfig, Normalizer, Projector, State, DEFAULT_NORMALIZER_WARMUP};
use crate::error::{Error, Result};
use crate::history::{
    self, read_csv, write_csv, EpisodeRecord, EvalRecord, StepRecord, TrainLog, EPISODE_HEADER, EVAL_HEADER,
    STEP_HEADER,
};
use crate::metrics::BeamformingAction;
use crate::neural::{Activation, DenseNet};
use crate::par::{self, Execution};
use crate::rollout;
use crate::scenario::{Scenario, ScenarioConfig, TRAIN_STREAM};

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";
/// Desk-scale DDPG step sizes. With 5000 environment steps the full-size
/// rates leave the networks close to their initialization.
pub const DESK_ACTOR_LR: f64 = 3e-4;
pub const DESK_CRITIC_LR: f64 = 1e-3;
pub const DESK_TAU: f64 = 1e-3;
/// Carrier frequency used when no configuration file is given.
pub const DEFAULT_CARRIER_FREQUENCY: f64 = 39e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Ddpg,
    Dqn,
    Random,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Ddpg => "ddpg",
            PolicyKind::Dqn => "dqn",
            PolicyKind::Random => "random",
        }
    }
}

/// Fully resolved run parameters. `ddpg.episodes` and
/// `ddpg.steps_per_episode` set the schedule for every policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub desk_scale: bool,
    pub policy: PolicyKind,
    /// ISAC weight of the reward.
    pub rho: f64,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Episodes between DDPG checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
    pub eval_episodes: usize,
    pub normalizer_warmup: u64,
    pub sweep_rhos: Vec<f64>,
    pub scenario: ScenarioConfig,
    pub ddpg: DdpgConfig,
    pub dqn: DqnConfig,
}

impl RunConfig {
    pub fn preset(carrier_frequency: f64, desk_scale: bool) -> Self {
        let mut scenario = ScenarioConfig::table_defaults(carrier_frequency);
        let mut ddpg = DdpgConfig::default();
        if desk_scale {
            scenario = scenario.desk_scale();
            ddpg.episodes = 500;
            ddpg.steps_per_episode = 10;
            ddpg.actor_lr = DESK_ACTOR_LR;
            ddpg.critic_lr = DESK_CRITIC_LR;
            ddpg.tau = DESK_TAU;
        }
        Self {
            desk_scale,
            policy: PolicyKind::Ddpg,
            rho: 0.2,
            seeds: vec![1, 2, 3],
            output_dir: PathBuf::from("runs"),
            checkpoint_interval: 0,
            eval_episodes: 100,
            normalizer_warmup: DEFAULT_NORMALIZER_WARMUP,
            sweep_rhos: vec![0.1, 0.9],
            scenario,
            ddpg,
            dqn: DqnConfig::default(),
        }
    }

    /// Parses a configuration file, filling unspecified keys from the
    /// preset it selects.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::parse(text, false)
    }

    /// Like [`RunConfig::from_toml_str`], with `force_desk_scale` selecting
    /// the desk-scale preset regardless of the file.
    pub fn parse(text: &str, force_desk_scale: bool) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        let fc = table
            .get("scenario")
            .and_then(|s| s.get("carrier_frequency"))
            .ok_or_else(|| Error::InvalidConfig("missing required key `scenario.carrier_frequency`".into()))?;
        let fc = fc
            .as_float()
            .or_else(|| fc.as_integer().map(|i| i as f64))
            .ok_or_else(|| Error::InvalidConfig("`scenario.carrier_frequency` must be a number".into()))?;
        if force_desk_scale {
            table.insert("desk_scale".into(), toml::Value::Boolean(true));
        }
        let desk = match table.get("desk_scale") {
            None => false,
            Some(v) => v
                .as_bool()
                .ok_or_else(|| Error::InvalidConfig("`desk_scale` must be a boolean".into()))?,
        };
        let preset = Self::preset(fc, desk);
        let mut merged = match toml::Value::try_from(&preset) {
            Ok(toml::Value::Table(t)) => t,
            _ => return Err(Error::InvalidConfig("preset does not serialize to a table".into())),
        };
        merge(&mut merged, table);
        let cfg: Self = serde_path_to_error::deserialize(toml::Value::Table(merged))
            .map_err(|e| Error::InvalidConfig(format!("`{}`: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn load_with(path: &Path, force_desk_scale: bool) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, force_desk_scale)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) || self.sweep_rhos.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::InvalidConfig("`rho` values must lie in [0, 1]".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("`seeds` needs at least one seed".into()));
        }
        self.scenario.validate()?;
        self.ddpg.validate()?;
        self.dqn.validate()
    }

    pub fn env_config(&self, rho: f64) -> EnvConfig {
        EnvConfig {
            rho,
            steps_per_episode: self.ddpg.steps_per_episode,
            normalizer_warmup: self.normalizer_warmup,
        }
    }

    /// Scenario whose channel draws follow `seed`.
    pub fn scenario_for(&self, seed: u64) -> Result<Arc<Scenario>> {
        let mut sc = self.scenario.clone();
        sc.rng_seed = seed;
        Ok(Arc::new(Scenario::new(sc)?))
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// A trained (or fixed) policy of any kind.
#[derive(Debug, Clone)]
pub enum TrainedPolicy {
    Ddpg(Box<Ddpg>),
    Dqn(Box<Dqn>),
    Random(Box<RandomPolicy>),
    Mrt(MrtPolicy),
}

impl Policy for TrainedPolicy {
    fn name(&self) -> &'static str {
        match self {
            TrainedPolicy::Ddpg(p) => p.name(),
            TrainedPolicy::Dqn(p) => p.name(),
            TrainedPolicy::Random(p) => p.name(),
            TrainedPolicy::Mrt(p) => p.name(),
        }
    }

    fn greedy(&self, state: &State) -> Result<BeamformingAction> {
        match self {
            TrainedPolicy::Ddpg(p) => p.greedy(state),
            TrainedPolicy::Dqn(p) => p.greedy(state),
            TrainedPolicy::Random(p) => p.greedy(state),
            TrainedPolicy::Mrt(p) => p.greedy(state),
        }
    }
}

/// Everything one training run leaves behind.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub rho: f64,
    pub log: TrainLog,
    pub normalizer: Normalizer,
    pub policy: TrainedPolicy,
    pub scenario: Arc<Scenario>,
}

impl SeedRun {
    pub fn evaluate(&self, cfg: &RunConfig, n: usize, exec: Execution) -> Result<Vec<EvalRecord>> {
        let positions = rollout::eval_positions(n, cfg.ddpg.episodes);
        rollout::evaluate(
            &self.policy,
            &self.scenario,
            cfg.env_config(self.rho),
            &self.normalizer,
            &positions,
            self.seed,
            exec,
        )
    }
}

/// Trains DDPG over `episodes`, optionally continuing from a saved state and
/// checkpointing into `checkpoint_dir` every `cfg.checkpoint_interval`
/// episodes and at the end.
pub fn train_ddpg(
    cfg: &RunConfig,
    rho: f64,
    seed: u64,
    episodes: Range<usize>,
    resume: Option<(Ddpg, Normalizer)>,
    checkpoint_dir: Option<&Path>,
) -> Result<SeedRun> {
    let scenario = cfg.scenario_for(seed)?;
    let mut env = Env::new(Arc::clone(&scenario), cfg.env_config(rho), TRAIN_STREAM)?;
    let mut agent = match resume {
        Some((agent, normalizer)) => {
            env.set_normalizer(normalizer)?;
            agent
        }
        None => Ddpg::new(cfg.ddpg.clone(), env.feature_len(), *env.projector(), seed)?,
    };
    let chunk = if cfg.checkpoint_interval == 0 {
        episodes.len().max(1)
    } else {
        cfg.checkpoint_interval
    };
    let mut log = TrainLog::default();
    let mut start = episodes.start;
    while start < episodes.end {
        let end = (start + chunk).min(episodes.end);
        log.extend(rollout::train(&mut agent, &mut env, start..end, seed)?);
        if let Some(dir) = checkpoint_dir {
            agent.save_checkpoint(dir, env.normalizer(), end)?;
        }
        start = end;
    }
    Ok(SeedRun {
        seed,
        rho,
        log,
        normalizer: env.normalizer().clone(),
        policy: TrainedPolicy::Ddpg(Box::new(agent)),
        scenario,
    })
}

/// Trains the chosen policy for the configured number of episodes.
pub fn train_seed(cfg: &RunConfig, kind: PolicyKind, rho: f64, seed: u64, checkpoint_dir: Option<&Path>) -> Result<SeedRun> {
    let episodes = 0..cfg.ddpg.episodes;
    if kind == PolicyKind::Ddpg {
        return train_ddpg(cfg, rho, seed, episodes, None, checkpoint_dir);
    }
    let scenario = cfg.scenario_for(seed)?;
    let mut env = Env::new(Arc::clone(&scenario), cfg.env_config(rho), TRAIN_STREAM)?;
    let projector = *env.projector();
    let (log, policy) = match kind {
        PolicyKind::Dqn => {
            let mut dqn = Dqn::new(cfg.dqn.clone(), env.feature_len(), scenario.tx_geometry(), projector, seed)?;
            let log = rollout::train(&mut dqn, &mut env, episodes, seed)?;
            (log, TrainedPolicy::Dqn(Box::new(dqn)))
        }
        _ => {
            let mut random = RandomPolicy::new(projector, seed);
            let log = rollout::train(&mut random, &mut env, episodes, seed)?;
            (log, TrainedPolicy::Random(Box::new(random)))
        }
    };
    Ok(SeedRun {
        seed,
        rho,
        log,
        normalizer: env.normalizer().clone(),
        policy,
        scenario,
    })
}

/// Mean, median and 5th/95th percentiles (linear interpolation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub p5: f64,
    pub p95: f64,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    let (sorted, _) = compute_cdf(values)?;
    let q = |p: f64| {
        let x = p * (sorted.len() - 1) as f64;
        let (lo, hi) = (x.floor() as usize, x.ceil() as usize);
        sorted[lo] + (sorted[hi] - sorted[lo]) * (x - lo as f64)
    };
    Ok(Summary {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        median: q(0.5),
        p5: q(0.05),
        p95: q(0.95),
    })
}

/// Sorted values and the empirical CDF `(i+1)/n`.
pub fn compute_cdf(values: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("CDF needs a non-empty list of finite values".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let cdf = (0..sorted.len()).map(|i| (i + 1) as f64 / n).collect();
    Ok((sorted, cdf))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdfRow {
    pub value: f64,
    pub cdf: f64,
}

pub fn write_cdf(path: &Path, values: &[f64]) -> Result<()> {
    let (v, c) = compute_cdf(values)?;
    let rows: Vec<CdfRow> = v.into_iter().zip(c).map(|(value, cdf)| CdfRow { value, cdf }).collect();
    write_csv(path, &rows, &["value", "cdf"])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub metric: String,
    pub mean: f64,
    pub median: f64,
    pub p5: f64,
    pub p95: f64,
}

fn summary_rows(evals: &[EvalRecord]) -> Result<Vec<SummaryRow>> {
    if evals.is_empty() {
        return Ok(Vec::new());
    }
    type Column = (&'static str, fn(&EvalRecord) -> f64);
    let columns: [Column; 3] = [
        ("sum_rate", |e| e.mean_sum_rate),
        ("sensing_sinr", |e| e.mean_sensing_sinr),
        ("reward", |e| e.mean_reward),
    ];
    columns
        .iter()
        .map(|(name, f)| {
            let s = summarize(&evals.iter().map(f).collect::<Vec<_>>())?;
            Ok(SummaryRow {
                metric: name.to_string(),
                mean: s.mean,
                median: s.median,
                p5: s.p5,
                p95: s.p95,
            })
        })
        .collect()
}

const SUMMARY_HEADER: &[&str] = &["metric", "mean", "median", "p5", "p95"];

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

fn write_logs(dir: &Path, log: &TrainLog) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_csv(&dir.join("train_log.csv"), &log.steps, STEP_HEADER)?;
    write_csv(&dir.join("episodes.csv"), &log.episodes, EPISODE_HEADER)
}

fn write_resolved(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(RESOLVED_CONFIG_FILE), cfg.to_toml()?)?;
    Ok(())
}

/// Trains `cfg.policy` on every seed and writes per-seed and merged logs,
/// DDPG checkpoints and the resolved configuration. With `resume`, DDPG
/// seeds continue from their last checkpoint.
pub fn cmd_train(cfg: &RunConfig, out: &Path, resume: bool, exec: Execution) -> Result<Vec<SeedRun>> {
    write_resolved(cfg, out)?;
    let runs: Vec<SeedRun> = par::map_indexed(exec, cfg.seeds.len(), |i| {
        let seed = cfg.seeds[i];
        let dir = seed_dir(out, seed);
        let ckpt = dir.join("checkpoint");
        let mut run = if cfg.policy == PolicyKind::Ddpg && resume && ckpt.join(CHECKPOINT_FILE).exists() {
            let (agent, normalizer, next) = Ddpg::load_checkpoint(&ckpt)?;
            let mut earlier = TrainLog {
                steps: read_csv::<StepRecord>(&dir.join("train_log.csv"))?,
                episodes: read_csv::<EpisodeRecord>(&dir.join("episodes.csv"))?,
            };
            earlier.steps.retain(|r| r.episode < next);
            earlier.episodes.retain(|r| r.episode < next);
            let mut run = train_ddpg(cfg, cfg.rho, seed, next..cfg.ddpg.episodes, Some((agent, normalizer)), Some(&ckpt))?;
            earlier.extend(std::mem::take(&mut run.log));
            run.log = earlier;
            run
        } else {
            let ckpt = (cfg.policy == PolicyKind::Ddpg).then_some(ckpt.as_path());
            train_seed(cfg, cfg.policy, cfg.rho, seed, ckpt)?
        };
        write_logs(&dir, &run.log)?;
        run.log.steps.shrink_to_fit();
        Ok(run)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let mut merged = TrainLog::default();
    for r in &runs {
        merged.extend(r.log.clone());
    }
    write_logs(out, &merged)?;
    Ok(runs)
}

/// What `eval` rolls out.
#[derive(Debug, Clone)]
pub enum EvalSource {
    /// Training output directory holding `seed_<n>/checkpoint/`.
    Checkpoints(PathBuf),
    Mrt,
    Random,
}

/// Frozen-policy evaluation on every seed; writes `eval.csv` and
/// `eval_summary.csv`.
pub fn cmd_eval(cfg: &RunConfig, out: &Path, source: &EvalSource, episodes: usize, exec: Execution) -> Result<Vec<EvalRecord>> {
    write_resolved(cfg, out)?;
    let mut all = Vec::new();
    for &seed in &cfg.seeds {
        let scenario = cfg.scenario_for(seed)?;
        let sc = scenario.config();
        let projector = Projector::new(sc.n_tx, sc.n_users, sc.p_max, sc.p_0)?;
        let (policy, normalizer) = match source {
            EvalSource::Checkpoints(dir) => {
                let (agent, normalizer, _) = Ddpg::load_checkpoint(&seed_dir(dir, seed).join("checkpoint"))?;
                if agent.projector != projector || normalizer.dim() != feature_len(sc.n_tx, sc.n_users) {
                    return Err(Error::Checkpoint(format!(
                        "checkpoint for seed {seed} was trained on a different array or user count"
                    )));
                }
                (TrainedPolicy::Ddpg(Box::new(agent)), normalizer)
            }
            EvalSource::Mrt => (
                TrainedPolicy::Mrt(MrtPolicy { p_max: sc.p_max }),
                Normalizer::new(feature_len(sc.n_tx, sc.n_users), 0),
            ),
            EvalSource::Random => (
                TrainedPolicy::Random(Box::new(RandomPolicy::new(projector, seed))),
                Normalizer::new(feature_len(sc.n_tx, sc.n_users), 0),
            ),
        };
        let run = SeedRun {
            seed,
            rho: cfg.rho,
            log: TrainLog::default(),
            normalizer,
            policy,
            scenario,
        };
        all.extend(run.evaluate(cfg, episodes, exec)?);
    }
    write_csv(&out.join("eval.csv"), &all, EVAL_HEADER)?;
    write_csv(&out.join("eval_summary.csv"), &summary_rows(&all)?, SUMMARY_HEADER)?;
    Ok(all)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Weight on spectral efficiency in the reward.
    pub rho: f64,
    /// The same run under the opposite labelling, where ρ weights sensing.
    pub prose_rho: f64,
    pub mean_sum_rate: f64,
    pub mean_sensing_sinr: f64,
    pub mean_reward: f64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Evaluation records per ρ, in the order of the ρ list.
    pub evals: Vec<Vec<EvalRecord>>,
    pub runs: Vec<Vec<SeedRun>>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n as f64
}

/// Trains and evaluates DDPG for every ρ with shared seeds. Writes
/// `cdf_sumrate_<ρ>.csv`, `cdf_sinr_<ρ>.csv` and `sweep_summary.csv`.
pub fn cmd_sweep_rho(cfg: &RunConfig, out: &Path, rhos: &[f64], exec: Execution) -> Result<SweepResult> {
    if rhos.is_empty() || rhos.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::InvalidArgument("ρ list must be non-empty with values in [0, 1]".into()));
    }
    write_resolved(cfg, out)?;
    let jobs: Vec<(f64, u64)> = rhos.iter().flat_map(|&r| cfg.seeds.iter().map(move |&s| (r, s))).collect();
    let done: Vec<(SeedRun, Vec<EvalRecord>)> = par::map_indexed(exec, jobs.len(), |i| {
        let (rho, seed) = jobs[i];
        let run = train_seed(cfg, PolicyKind::Ddpg, rho, seed, None)?;
        write_logs(&seed_dir(&out.join(format!("rho_{rho}")), seed), &run.log)?;
        let evals = run.evaluate(cfg, cfg.eval_episodes, Execution::Sequential)?;
        Ok((run, evals))
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let mut result = SweepResult {
        rows: Vec::new(),
        evals: Vec::new(),
        runs: Vec::new(),
    };
    let mut it = done.into_iter();
    for &rho in rhos {
        let (runs, evals): (Vec<SeedRun>, Vec<Vec<EvalRecord>>) = it.by_ref().take(cfg.seeds.len()).unzip();
        let evals: Vec<EvalRecord> = evals.into_iter().flatten().collect();
        let rates: Vec<f64> = evals.iter().map(|e| e.mean_sum_rate).collect();
        let sinrs: Vec<f64> = evals.iter().map(|e| e.mean_sensing_sinr).collect();
        write_cdf(&out.join(format!("cdf_sumrate_{rho}.csv")), &rates)?;
        write_cdf(&out.join(format!("cdf_sinr_{rho}.csv")), &sinrs)?;
        result.rows.push(SweepRow {
            rho,
            prose_rho: 1.0 - rho,
            mean_sum_rate: mean(rates.iter().copied()),
            mean_sensing_sinr: mean(sinrs.iter().copied()),
            mean_reward: mean(evals.iter().map(|e| e.mean_reward)),
        });
        result.evals.push(evals);
        result.runs.push(runs);
    }
    write_csv(
        &out.join("sweep_summary.csv"),
        &result.rows,
        &["rho", "prose_rho", "mean_sum_rate", "mean_sensing_sinr", "mean_reward"],
    )?;
    Ok(result)
}

/// Timing of the actor forward pass plus power projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub n_tx: usize,
    pub n_users: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub repetitions: usize,
    pub mean_us: f64,
    pub median_us: f64,
    pub p95_us: f64,
    pub max_us: f64,
}

/// Times `repetitions` single-state decisions of a freshly initialized actor
/// with the given hidden widths.
pub fn measure_decision_latency(n_tx: usize, n_users: usize, hidden: &[usize], repetitions: usize) -> Result<LatencyReport> {
    if repetitions == 0 {
        return Err(Error::InvalidArgument("at least one repetition is needed".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let projector = Projector::new(n_tx, n_users, 1.0, 1.0)?;
    let state_dim = feature_len(n_tx, n_users);
    let mut sizes = vec![state_dim];
    sizes.extend(hidden);
    sizes.push(projector.action_len());
    let actor = DenseNet::new(&sizes, Activation::Relu, Activation::Tanh, Some(3e-3), &mut rng)?;
    let state: Vec<f64> = (0..state_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut times = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        let raw = actor.predict_one(&state)?;
        let a = projector.project(&raw)?;
        times.push(start.elapsed().as_secs_f64() * 1e6);
        std::hint::black_box(a);
    }
    let s = summarize(&times)?;
    Ok(LatencyReport {
        n_tx,
        n_users,
        state_dim,
        action_dim: projector.action_len(),
        repetitions,
        mean_us: s.mean,
        median_us: s.median,
        p95_us: s.p95,
        max_us: times.iter().copied().fold(0.0, f64::max),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEvalRow {
    pub policy: String,
    pub seed: u64,
    pub index: usize,
    pub episode: usize,
    pub mean_reward: f64,
    pub mean_sum_rate: f64,
    pub mean_sensing_sinr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub policy: String,
    pub mean_sum_rate: f64,
    pub mean_sensing_sinr: f64,
    pub mean_reward: f64,
    pub train_latency_mean_us: f64,
}

#[derive(Debug, Clone)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
    pub evals: Vec<PolicyEvalRow>,
    pub runs: Vec<SeedRun>,
    pub latency: LatencyReport,
}

impl BenchResult {
    pub fn row(&self, policy: PolicyKind) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.policy == policy.name())
    }
}

/// Paired-seed comparison of DDPG, DQN and random beams, plus the decision
/// latency of an actor with the full-size dimensions (16 elements, four
/// users) and the configured hidden widths.
pub fn cmd_bench(cfg: &RunConfig, out: &Path, exec: Execution) -> Result<BenchResult> {
    write_resolved(cfg, out)?;
    let kinds = [PolicyKind::Ddpg, PolicyKind::Dqn, PolicyKind::Random];
    let jobs: Vec<(PolicyKind, u64)> = kinds.iter().flat_map(|&k| cfg.seeds.iter().map(move |&s| (k, s))).collect();
    let done: Vec<(SeedRun, Vec<EvalRecord>)> = par::map_indexed(exec, jobs.len(), |i| {
        let (kind, seed) = jobs[i];
        let run = train_seed(cfg, kind, cfg.rho, seed, None)?;
        write_logs(&seed_dir(&out.join(kind.name()), seed), &run.log)?;
        let evals = run.evaluate(cfg, cfg.eval_episodes, Execution::Sequential)?;
        Ok((run, evals))
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut eval_rows = Vec::new();
    let mut runs = Vec::new();
    let mut it = done.into_iter();
    for kind in kinds {
        let (kind_runs, evals): (Vec<SeedRun>, Vec<Vec<EvalRecord>>) = it.by_ref().take(cfg.seeds.len()).unzip();
        let evals: Vec<EvalRecord> = evals.into_iter().flatten().collect();
        rows.push(BenchRow {
            policy: kind.name().into(),
            mean_sum_rate: mean(evals.iter().map(|e| e.mean_sum_rate)),
            mean_sensing_sinr: mean(evals.iter().map(|e| e.mean_sensing_sinr)),
            mean_reward: mean(evals.iter().map(|e| e.mean_reward)),
            train_latency_mean_us: mean(kind_runs.iter().flat_map(|r| r.log.steps.iter().map(|s| s.actor_latency_us))),
        });
        eval_rows.extend(evals.iter().map(|e| PolicyEvalRow {
            policy: kind.name().into(),
            seed: e.seed,
            index: e.index,
            episode: e.episode,
            mean_reward: e.mean_reward,
            mean_sum_rate: e.mean_sum_rate,
            mean_sensing_sinr: e.mean_sensing_sinr,
        }));
        runs.extend(kind_runs);
    }
    let full = ScenarioConfig::table_defaults(cfg.scenario.carrier_frequency);
    let latency = measure_decision_latency(full.n_tx, full.n_users, &cfg.ddpg.hidden, 1000)?;
    write_csv(
        &out.join("bench_summary.csv"),
        &rows,
        &["policy", "mean_sum_rate", "mean_sensing_sinr", "mean_reward", "train_latency_mean_us"],
    )?;
    write_csv(
        &out.join("bench_eval.csv"),
        &eval_rows,
        &["policy", "seed", "index", "episode", "mean_reward", "mean_sum_rate", "mean_sensing_sinr"],
    )?;
    write_csv(
        &out.join("latency.csv"),
        &[latency],
        &[
            "n_tx",
            "n_users",
            "state_dim",
            "action_dim",
            "repetitions",
            "mean_us",
            "median_us",
            "p95_us",
            "max_us",
        ],
    )?;
    Ok(BenchResult {
        rows,
        evals: eval_rows,
        runs,
        latency,
    })
}

/// Mean episode reward over the first and last `window` episodes.
pub fn reward_windows(episodes: &[EpisodeRecord], window: usize) -> (f64, f64) {
    let w = window.min(episodes.len());
    let first = mean(episodes[..w].iter().map(|e| e.mean_reward));
    let last = mean(episodes[episodes.len() - w..].iter().map(|e| e.mean_reward));
    (first, last)
}

/// Running mean of episode rewards from the first episode on.
pub fn cumulative_average(episodes: &[EpisodeRecord]) -> Vec<f64> {
    let mut sum = 0.0;
    episodes
        .iter()
        .enumerate()
        .map(|(i, e)| {
            sum += e.mean_reward;
            sum / (i + 1) as f64
        })
        .collect()
}

/// `episodes.csv` with the trailing timing columns removed, for
/// determinism checks.
pub fn episodes_without_timing(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(|l| {
            if l.starts_with('#') {
                return l.to_string();
            }
            let fields: Vec<&str> = l.split(',').collect();
            fields[..fields.len().saturating_sub(history::EPISODE_TIMING_COLUMNS)].join(",")
        })
        .collect::<Vec<_>>()
        .join("\n"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny(cfg: &mut RunConfig) {
        cfg.ddpg.episodes = 6;
        cfg.ddpg.steps_per_episode = 4;
        cfg.ddpg.hidden = vec![16, 8];
        cfg.ddpg.batch_size = 8;
        cfg.dqn.hidden = vec![16];
        cfg.dqn.batch_size = 8;
        cfg.eval_episodes = 3;
        cfg.normalizer_warmup = 20;
        cfg.seeds = vec![5, 6];
    }

    #[test]
    fn missing_carrier_frequency_is_named() {
        let err = RunConfig::from_toml_str("[scenario]\nn_tx = 8\n").unwrap_err();
        assert!(err.to_string().contains("scenario.carrier_frequency"), "{err}");
        let err = RunConfig::from_toml_str("rho = 0.5\n").unwrap_err();
        assert!(err.to_string().contains("scenario.carrier_frequency"), "{err}");
    }

    #[test]
    fn bad_keys_are_named() {
        let err = RunConfig::from_toml_str("[scenario]\ncarrier_frequency = 39e9\nn_tx = \"eight\"\n").unwrap_err();
        assert!(err.to_string().contains("scenario.n_tx"), "{err}");
        let err = RunConfig::from_toml_str("[scenario]\ncarrier_frequency = 39e9\n[ddpg]\ngama = 0.3\n").unwrap_err();
        assert!(err.to_string().contains("gama"), "{err}");
    }

    #[test]
    fn empty_sections_give_table_defaults() {
        let cfg = RunConfig::from_toml_str("[scenario]\ncarrier_frequency = 39e9\n[ddpg]\n").unwrap();
        assert_eq!(cfg, RunConfig::preset(39e9, false));
        assert_eq!(cfg.ddpg, DdpgConfig::default());
        assert_eq!((cfg.scenario.n_tx, cfg.scenario.n_users), (16, 4));
        assert_eq!(cfg.ddpg.episodes, 5000);
    }

    #[test]
    fn desk_flag_and_overrides() {
        let cfg = RunConfig::from_toml_str(
            "desk_scale = true\nrho = 0.9\n[scenario]\ncarrier_frequency = 28e9\n[ddpg]\nbatch_size = 64\n",
        )
        .unwrap();
        assert_eq!((cfg.scenario.n_tx, cfg.scenario.n_rx, cfg.scenario.n_users), (8, 8, 2));
        assert_eq!((cfg.ddpg.episodes, cfg.ddpg.steps_per_episode), (500, 10));
        assert_eq!(cfg.ddpg.batch_size, 64);
        assert_eq!(cfg.ddpg.gamma, 0.5);
        assert_eq!((cfg.ddpg.actor_lr, cfg.ddpg.critic_lr, cfg.ddpg.tau), (3e-4, 1e-3, 1e-3));
        assert_eq!(cfg.rho, 0.9);
        assert_eq!(cfg.scenario.carrier_frequency, 28e9);
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig::preset(39e9, true);
        cfg.scenario.csi_noise_std = 1.0 / 3.0;
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn shipped_configs_load() {
        let full = RunConfig::from_toml_str(include_str!("../../../configs/full.toml")).unwrap();
        let mut expected = RunConfig::preset(39e9, false);
        expected.output_dir = "runs/full".into();
        assert_eq!(full, expected);
        let desk = RunConfig::from_toml_str(include_str!("../../../configs/desk.toml")).unwrap();
        let mut expected = RunConfig::preset(39e9, true);
        expected.output_dir = "runs/desk".into();
        assert_eq!(desk, expected);
    }

    #[test]
    fn cdf_examples() {
        assert_eq!(compute_cdf(&[3.0, 1.0, 2.0]).unwrap(), (vec![1.0, 2.0, 3.0], vec![1.0 / 3.0, 2.0 / 3.0, 1.0]));
        assert_eq!(compute_cdf(&[4.0]).unwrap(), (vec![4.0], vec![1.0]));
        assert_eq!(compute_cdf(&[1.0, 1.0]).unwrap(), (vec![1.0, 1.0], vec![0.5, 1.0]));
        assert!(matches!(compute_cdf(&[]), Err(Error::InvalidArgument(_))));
        assert!(matches!(compute_cdf(&[1.0, f64::NAN]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn summary_percentiles() {
        let v: Vec<f64> = (0..=100).map(f64::from).collect();
        let s = summarize(&v).unwrap();
        assert_eq!((s.mean, s.median, s.p5, s.p95), (50.0, 50.0, 5.0, 95.0));
    }

    #[test]
    fn short_gated_run_has_no_updates() {
        let mut cfg = RunConfig::preset(39e9, true);
        cfg.ddpg.episodes = 1;
        cfg.ddpg.steps_per_episode = 20;
        cfg.ddpg.hidden = vec![16];
        let run = train_seed(&cfg, PolicyKind::Ddpg, 0.2, 1, None).unwrap();
        assert_eq!(run.log.steps.len(), 20);
        assert_eq!(run.log.update_count(), 0);
    }

    #[test]
    fn training_is_deterministic() {
        let mut cfg = RunConfig::preset(39e9, true);
        tiny(&mut cfg);
        let a = train_seed(&cfg, PolicyKind::Ddpg, 0.2, 4, None).unwrap();
        let b = train_seed(&cfg, PolicyKind::Ddpg, 0.2, 4, None).unwrap();
        let bits = |r: &SeedRun| r.log.steps.iter().map(|s| s.reward.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert!(a.log.update_count() > 0);
        for s in &a.log.steps {
            assert!(s.reward.is_finite());
        }
    }

    #[test]
    fn checkpoint_resume_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::preset(39e9, true);
        tiny(&mut cfg);
        let straight = train_ddpg(&cfg, 0.2, 9, 0..6, None, None).unwrap();
        let ckpt = dir.path().join("ck");
        let first = train_ddpg(&cfg, 0.2, 9, 0..3, None, Some(&ckpt)).unwrap();
        let (agent, norm, next) = Ddpg::load_checkpoint(&ckpt).unwrap();
        assert_eq!(next, 3);
        let second = train_ddpg(&cfg, 0.2, 9, 3..6, Some((agent, norm)), None).unwrap();
        let rewards = |l: &TrainLog| l.steps.iter().map(|s| s.reward.to_bits()).collect::<Vec<_>>();
        let mut joined = first.log.clone();
        joined.extend(second.log.clone());
        assert_eq!(rewards(&joined), rewards(&straight.log));
        match (&straight.policy, &second.policy) {
            (TrainedPolicy::Ddpg(a), TrainedPolicy::Ddpg(b)) => {
                assert_eq!(a.actor.params(), b.actor.params());
                assert_eq!(a.critic_target.params(), b.critic_target.params());
                assert_eq!(a.replay, b.replay);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn train_command_writes_outputs_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::preset(39e9, true);
        tiny(&mut cfg);
        cfg.checkpoint_interval = 2;
        let out = dir.path();
        cmd_train(&cfg, out, false, Execution::Sequential).unwrap();
        for f in ["train_log.csv", "episodes.csv", RESOLVED_CONFIG_FILE] {
            assert!(out.join(f).exists(), "{f}");
        }
        let merged: Vec<EpisodeRecord> = read_csv(&out.join("episodes.csv")).unwrap();
        assert_eq!(merged.len(), 12);
        assert_eq!(merged[0].seed, 5);
        assert_eq!(merged[6].seed, 6);
        let before = episodes_without_timing(&out.join("episodes.csv")).unwrap();
        let resolved = RunConfig::load(&out.join(RESOLVED_CONFIG_FILE)).unwrap();
        assert_eq!(resolved, cfg);

        // a longer schedule picks up from the saved checkpoints
        let mut longer = cfg.clone();
        longer.ddpg.episodes = 8;
        cmd_train(&longer, out, true, Execution::Sequential).unwrap();
        let resumed: Vec<EpisodeRecord> = read_csv(&seed_dir(out, 5).join("episodes.csv")).unwrap();
        assert_eq!(resumed.iter().map(|e| e.episode).collect::<Vec<_>>(), (0..8).collect::<Vec<_>>());

        let dir2 = tempfile::tempdir().unwrap();
        cmd_train(&longer, dir2.path(), false, Execution::Sequential).unwrap();
        let fresh = episodes_without_timing(&seed_dir(dir2.path(), 5).join("episodes.csv")).unwrap();
        assert_eq!(episodes_without_timing(&seed_dir(out, 5).join("episodes.csv")).unwrap(), fresh);
        assert!(fresh.starts_with(&before.lines().take(2).collect::<Vec<_>>().join("\n")));
    }

    #[test]
    fn mrt_evaluation_matches_closed_form() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::preset(39e9, true);
        tiny(&mut cfg);
        let evals = cmd_eval(&cfg, dir.path(), &EvalSource::Mrt, 4, Execution::Parallel).unwrap();
        assert_eq!(evals.len(), 8);
        for e in &evals {
            let sc = cfg.scenario_for(e.seed).unwrap();
            let snap = sc.snapshot(e.episode, crate::scenario::EVAL_STREAM).unwrap();
            let a = crate::env::mrt_action(&snap, sc.config().p_max).unwrap();
            let p = crate::metrics::evaluate(&snap, &a, cfg.rho).unwrap();
            assert_relative_eq!(e.mean_sum_rate, p.sum_rate, max_relative = 1e-12);
            assert_relative_eq!(e.mean_sensing_sinr, p.sensing_sinr, max_relative = 1e-12);
        }
        let again = cmd_eval(&cfg, dir.path(), &EvalSource::Mrt, 4, Execution::Sequential).unwrap();
        assert_eq!(evals, again);
    }

    #[test]
    fn zero_episode_eval_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::preset(39e9, true);
        tiny(&mut cfg);
        let evals = cmd_eval(&cfg, dir.path(), &EvalSource::Random, 0, Execution::Sequential).unwrap();
        assert!(evals.is_empty());
        let text = fs::read_to_string(dir.path().join("eval.csv")).unwrap();
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn checkpoint_eval_is_repeatable_and_checks_shape() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::preset(39e9, true);
        tiny(&mut cfg);
        cmd_train(&cfg, dir.path(), false, Execution::Sequential).unwrap();
        let src = EvalSource::Checkpoints(dir.path().to_path_buf());
        let a = cmd_eval(&cfg, &dir.path().join("e1"), &src, 3, Execution::Parallel).unwrap();
        let b = cmd_eval(&cfg, &dir.path().join("e2"), &src, 3, Execution::Sequential).unwrap();
        assert_eq!(a, b);
        let mut other = cfg.clone();
        other.scenario = other.scenario.clone();
        other.scenario.n_users = 1;
        other.scenario.user_positions.truncate(1);
        assert!(matches!(
            cmd_eval(&other, &dir.path().join("e3"), &src, 3, Execution::Sequential),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn sweep_emits_cdf_tables() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::preset(39e9, true);
        tiny(&mut cfg);
        let res = cmd_sweep_rho(&cfg, dir.path(), &[0.1, 0.9], Execution::Sequential).unwrap();
        assert_eq!(res.rows.len(), 2);
        let mut cdfs: Vec<String> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .filter(|n| n.starts_with("cdf_"))
            .collect();
        cdfs.sort();
        assert_eq!(cdfs, ["cdf_sinr_0.1.csv", "cdf_sinr_0.9.csv", "cdf_sumrate_0.1.csv", "cdf_sumrate_0.9.csv"]);
        assert!(dir.path().join("sweep_summary.csv").exists());
        let rows: Vec<CdfRow> = read_csv(&dir.path().join("cdf_sumrate_0.1.csv")).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.windows(2).all(|w| w[0].cdf <= w[1].cdf && w[0].value <= w[1].value));
        assert_eq!(rows.last().unwrap().cdf, 1.0);
    }

    #[test]
    fn latency_report_is_populated() {
        let r = measure_decision_latency(16, 4, &[400, 300], 5).unwrap();
        assert_eq!((r.state_dim, r.action_dim), (322, 160));
        assert!(r.median_us > 0.0 && r.max_us >= r.median_us);
    }
}
