use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use isac_drl::par::Execution;
use isac_drl::run::{self, EvalSource, PolicyKind, RunConfig, DEFAULT_CARRIER_FREQUENCY};
use isac_drl::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "isac", version, about = "DRL beamforming for monostatic ISAC")]
struct Cli {
    /// TOML run configuration; `scenario.carrier_frequency` is required.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed. Falls back to ISAC_SEED, then to the config's seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: the config's `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Training episodes per run.
    #[arg(long, global = true)]
    episodes: Option<usize>,
    /// Use the 8-element, two-user preset with a shorter schedule.
    #[arg(long, global = true)]
    desk_scale: bool,
    /// Run seeds and evaluation episodes one at a time.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the configured policy on every seed.
    Train {
        #[arg(long, value_enum)]
        policy: Option<TrainPolicy>,
        /// Continue each seed from its last checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a trained DDPG checkpoint or a fixed baseline.
    Eval {
        /// Training output directory holding `seed_<n>/checkpoint/`.
        #[arg(long, conflicts_with = "policy")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        policy: Option<FixedPolicy>,
        /// Evaluation episodes per seed (default: the config's `eval_episodes`).
        #[arg(long)]
        eval_episodes: Option<usize>,
    },
    /// Train and evaluate DDPG for several reward weights.
    SweepRho {
        /// Comma-separated ρ values (default: the config's `sweep_rhos`).
        #[arg(long, value_delimiter = ',')]
        rhos: Option<Vec<f64>>,
    },
    /// Compare DDPG, DQN and random beams on paired seeds and time decisions.
    Bench,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TrainPolicy {
    Ddpg,
    Dqn,
    Random,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FixedPolicy {
    Mrt,
    Random,
}

fn seed_override(flag: Option<u64>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("ISAC_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::InvalidArgument(format!("ISAC_SEED={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load_with(path, cli.desk_scale)?,
        None => RunConfig::preset(DEFAULT_CARRIER_FREQUENCY, cli.desk_scale),
    };
    if let Some(seed) = seed_override(cli.seed)? {
        cfg.seeds = vec![seed];
    }
    if let Some(dir) = &cli.out {
        cfg.output_dir = dir.clone();
    }
    if let Some(n) = cli.episodes {
        cfg.ddpg.episodes = n;
    }
    if let Command::Train { policy: Some(p), .. } = cli.command {
        cfg.policy = match p {
            TrainPolicy::Ddpg => PolicyKind::Ddpg,
            TrainPolicy::Dqn => PolicyKind::Dqn,
            TrainPolicy::Random => PolicyKind::Random,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli)?;
    let out = cfg.output_dir.clone();
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match cli.command {
        Command::Train { resume, .. } => {
            let runs = run::cmd_train(&cfg, &out, resume, exec)?;
            for r in &runs {
                let (first, last) = run::reward_windows(&r.log.episodes, 50);
                println!(
                    "seed {}: {} episodes, {} updates, mean reward first {first:.4} last {last:.4}",
                    r.seed,
                    r.log.episodes.len(),
                    r.log.update_count()
                );
            }
        }
        Command::Eval {
            checkpoint,
            policy,
            eval_episodes,
        } => {
            let source = match (checkpoint, policy) {
                (Some(dir), _) => EvalSource::Checkpoints(dir),
                (None, Some(FixedPolicy::Random)) => EvalSource::Random,
                (None, Some(FixedPolicy::Mrt)) => EvalSource::Mrt,
                (None, None) => {
                    return Err(Error::InvalidArgument("eval needs --checkpoint or --policy".into()));
                }
            };
            let evals = run::cmd_eval(&cfg, &out, &source, eval_episodes.unwrap_or(cfg.eval_episodes), exec)?;
            if !evals.is_empty() {
                let rate = run::summarize(&evals.iter().map(|e| e.mean_sum_rate).collect::<Vec<_>>())?;
                let sinr = run::summarize(&evals.iter().map(|e| e.mean_sensing_sinr).collect::<Vec<_>>())?;
                println!("sum rate     mean {:.4} median {:.4} bits/s/Hz", rate.mean, rate.median);
                println!("sensing SINR mean {:.4e} median {:.4e}", sinr.mean, sinr.median);
            }
        }
        Command::SweepRho { rhos } => {
            let rhos = rhos.unwrap_or_else(|| cfg.sweep_rhos.clone());
            let res = run::cmd_sweep_rho(&cfg, &out, &rhos, exec)?;
            for r in &res.rows {
                println!(
                    "rho {}: sum rate {:.4}, sensing SINR {:.4e}, reward {:.4}",
                    r.rho, r.mean_sum_rate, r.mean_sensing_sinr, r.mean_reward
                );
            }
        }
        Command::Bench => {
            let res = run::cmd_bench(&cfg, &out, exec)?;
            for r in &res.rows {
                println!(
                    "{:<6} sum rate {:.4}, sensing SINR {:.4e}, reward {:.4}",
                    r.policy, r.mean_sum_rate, r.mean_sensing_sinr, r.mean_reward
                );
            }
            let l = res.latency;
            println!(
                "decision latency ({}x{} actor input/output): median {:.1} us, p95 {:.1} us",
                l.state_dim, l.action_dim, l.median_us, l.p95_us
            );
        }
    }
    println!("outputs in {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidConfig(_) | Error::InvalidArgument(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
