//! Episode loops shared by every policy: training with exploration and
//! frozen-policy evaluation.

use std::ops::Range;
use std::sync::Arc;
use std::time::Instant;

use crate::agent::{Learner, Policy};
use crate::env::{Env, EnvConfig, Normalizer, Transition};
use crate::error::{Error, Result};
use crate::history::{db, EpisodeRecord, EvalRecord, StepRecord, TrainLog};
use crate::par::{self, Execution};
use crate::scenario::{Scenario, EVAL_STREAM};

/// Runs the training episodes `episodes` in order: act, step, store and
/// learn once per step.
pub fn train<L: Learner>(learner: &mut L, env: &mut Env, episodes: Range<usize>, seed: u64) -> Result<TrainLog> {
    let k = env.config().steps_per_episode;
    let mut log = TrainLog::default();
    for t in episodes {
        let start = Instant::now();
        let mut state = env.reset(t)?;
        let mut rewards = 0.0;
        let mut rates = 0.0;
        let mut sinrs = 0.0;
        let mut updates = 0;
        let mut latency_us = 0.0;
        for step in 0..k {
            let exploration = learner.exploration();
            let decision = learner.explore(&state)?;
            let out = env.step(&decision.action)?;
            let p = out.performance;
            if !(p.sum_rate.is_finite() && p.sensing_sinr.is_finite()) {
                return Err(Error::NonFinite {
                    what: "performance metric".into(),
                    episode: t,
                    step,
                });
            }
            let info = learner.learn(Transition {
                state: std::mem::take(&mut state.features),
                action: decision.record,
                reward: out.reward,
                next_state: out.next.features.clone(),
                terminal: out.done,
            })?;
            let lat = decision.latency.as_secs_f64() * 1e6;
            log.steps.push(StepRecord {
                seed,
                episode: t,
                step,
                reward: out.reward,
                sum_rate: p.sum_rate,
                sensing_sinr: p.sensing_sinr,
                sensing_sinr_db: db(p.sensing_sinr),
                exploration,
                updated: info.updated,
                critic_loss: info.critic_loss,
                actor_latency_us: lat,
            });
            rewards += out.reward;
            rates += p.sum_rate;
            sinrs += p.sensing_sinr;
            updates += info.updated as usize;
            latency_us += lat;
            state = out.next;
            if out.done {
                break;
            }
        }
        let n = k as f64;
        log.episodes.push(EpisodeRecord {
            seed,
            episode: t,
            mean_reward: rewards / n,
            mean_sum_rate: rates / n,
            mean_sensing_sinr: sinrs / n,
            updates,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            actor_latency_mean_us: latency_us / n,
            actor_latency_total_us: latency_us,
        });
    }
    Ok(log)
}

/// `n` trajectory positions spread evenly over the first `span` episodes.
pub fn eval_positions(n: usize, span: usize) -> Vec<usize> {
    (0..n).map(|i| i * span / n.max(1)).collect()
}

/// Greedy rollouts at the given trajectory positions on the evaluation
/// stream, with normalization statistics frozen at `normalizer`.
pub fn evaluate<P: Policy>(
    policy: &P,
    scenario: &Arc<Scenario>,
    env_cfg: EnvConfig,
    normalizer: &Normalizer,
    positions: &[usize],
    seed: u64,
    exec: Execution,
) -> Result<Vec<EvalRecord>> {
    let mut frozen = normalizer.clone();
    frozen.frozen = true;
    par::map_indexed(exec, positions.len(), |i| {
        let mut env = Env::new(Arc::clone(scenario), env_cfg, EVAL_STREAM)?;
        env.set_normalizer(frozen.clone())?;
        let mut state = env.reset(positions[i])?;
        let (mut r, mut rate, mut sinr) = (0.0, 0.0, 0.0);
        for _ in 0..env_cfg.steps_per_episode {
            let a = policy.greedy(&state)?;
            let out = env.step(&a)?;
            r += out.reward;
            rate += out.performance.sum_rate;
            sinr += out.performance.sensing_sinr;
            state = out.next;
        }
        let n = env_cfg.steps_per_episode as f64;
        Ok(EvalRecord {
            seed,
            index: i,
            episode: positions[i],
            mean_reward: r / n,
            mean_sum_rate: rate / n,
            mean_sensing_sinr: sinr / n,
        })
    })
    .into_iter()
    .collect()
}
