//! DDPG learner: actor and critic with target copies, FIFO replay, Gaussian
//! exploration and a policy gradient taken through the power projection.
//!
//! The critic scores `[state, P(a)/√P_max]`, where `a` is the raw actor
//! output and `P` the projection onto the power budget, so its action input
//! has unit norm whatever `P_max` is.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::{Normalizer, Projector, State, Transition};
use crate::error::{Error, Result};
use crate::metrics::BeamformingAction;
use crate::neural::{soft_update, Activation, Adam, DenseNet, Gradients, StepOutcome};

/// Random stream of agent-side randomness (initialization, noise, sampling).
pub const AGENT_STREAM: u64 = 2;

/// Fixed-capacity FIFO store, sampled uniformly with replacement.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer<T> {
    items: Vec<T>,
    capacity: usize,
    next: usize,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("replay capacity must be at least 1".into()));
        }
        Ok(Self {
            items: Vec::new(),
            capacity,
            next: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Inserts `item`, evicting the oldest entry when full.
    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.next] = item;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Entries from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        let split = if self.items.len() < self.capacity { 0 } else { self.next };
        self.items[split..].iter().chain(self.items[..split].iter())
    }

    pub fn sample<'a, R: Rng + ?Sized>(&'a self, rng: &mut R, n: usize) -> Vec<&'a T> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdpgConfig {
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    /// Environment steps between soft target updates.
    pub target_update_interval: usize,
    pub noise_std_initial: f64,
    /// Per-step multiplicative decay `λ` of the exploration noise.
    pub noise_decay: f64,
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub buffer_capacity: usize,
    pub hidden: Vec<usize>,
}

impl Default for DdpgConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            tau: 1e-6,
            batch_size: 32,
            target_update_interval: 2,
            noise_std_initial: 0.1,
            noise_decay: 1e-5,
            episodes: 5000,
            steps_per_episode: 20,
            actor_lr: 1e-5,
            critic_lr: 1e-5,
            buffer_capacity: 100_000,
            hidden: vec![400, 300],
        }
    }
}

impl DdpgConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("ddpg.gamma must lie in [0, 1]");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("ddpg.tau must lie in (0, 1]");
        }
        if self.batch_size == 0 || self.target_update_interval == 0 || self.steps_per_episode == 0 {
            return bad("ddpg.batch_size, target_update_interval and steps_per_episode must be at least 1");
        }
        if self.buffer_capacity == 0 {
            return bad("ddpg.buffer_capacity must be at least 1");
        }
        if self.noise_std_initial.is_nan() || self.noise_std_initial < 0.0 || !(0.0..1.0).contains(&self.noise_decay) {
            return bad("ddpg.noise_std_initial must be non-negative and noise_decay in [0, 1)");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("ddpg learning rates must be positive");
        }
        if self.hidden.contains(&0) {
            return bad("ddpg.hidden layer widths must be positive");
        }
        Ok(())
    }
}

/// What one decision produced: the record to store, the projected action
/// and the time spent in forward pass plus projection.
#[derive(Debug, Clone)]
pub struct Decision<A> {
    pub record: A,
    pub action: BeamformingAction,
    pub latency: Duration,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LearnInfo {
    pub updated: bool,
    pub critic_loss: Option<f64>,
    /// An optimizer step was dropped because of a non-finite gradient.
    pub skipped: bool,
}

/// A frozen decision rule.
pub trait Policy: Send + Sync {
    fn name(&self) -> &'static str;
    fn greedy(&self, state: &State) -> Result<BeamformingAction>;
}

/// A policy that explores and learns from transitions.
pub trait Learner: Policy {
    type Record: Clone;
    fn explore(&mut self, state: &State) -> Result<Decision<Self::Record>>;
    fn learn(&mut self, t: Transition<Self::Record>) -> Result<LearnInfo>;
    /// Current exploration level (noise std or ε).
    fn exploration(&self) -> f64;
}

/// `μ(s) + N(0, σ²)` clamped to `[−1, 1]`.
pub fn act<R: Rng + ?Sized>(actor: &DenseNet, state: &[f64], noise_std: f64, rng: &mut R) -> Result<Vec<f64>> {
    let mut a = actor.predict_one(state)?;
    if noise_std > 0.0 {
        let n = Normal::new(0.0, noise_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for x in &mut a {
            *x = (*x + n.sample(rng)).clamp(-1.0, 1.0);
        }
    } else {
        a.iter_mut().for_each(|x| *x = x.clamp(-1.0, 1.0));
    }
    Ok(a)
}

/// How raw actor outputs become critic action inputs.
#[derive(Debug, Clone, Copy)]
pub enum ActionMap<'a> {
    Identity,
    /// `P(a)/√P_max`.
    Projected(&'a Projector),
}

impl ActionMap<'_> {
    pub fn apply(&self, raw: &[f64]) -> Result<Vec<f64>> {
        match self {
            ActionMap::Identity => Ok(raw.to_vec()),
            ActionMap::Projected(p) => {
                let s = 1.0 / p.p_max.sqrt();
                Ok(p.project_real(raw)?.into_iter().map(|x| x * s).collect())
            }
        }
    }

    pub fn vjp(&self, raw: &[f64], g: &[f64]) -> Result<Vec<f64>> {
        match self {
            ActionMap::Identity => Ok(g.to_vec()),
            ActionMap::Projected(p) => {
                let s = 1.0 / p.p_max.sqrt();
                Ok(p.vjp(raw, g)?.into_iter().map(|x| x * s).collect())
            }
        }
    }
}

/// Critic input rows `[s, map(a)]`.
pub fn critic_inputs(states: ArrayView2<f64>, raw_actions: ArrayView2<f64>, map: ActionMap) -> Result<Array2<f64>> {
    let (b, sd) = states.dim();
    let ad = raw_actions.ncols();
    let mut x = Array2::zeros((b, sd + ad));
    x.slice_mut(s![.., ..sd]).assign(&states);
    for (i, row) in raw_actions.outer_iter().enumerate() {
        let mapped = map.apply(row.as_slice().expect("standard layout"))?;
        x.slice_mut(s![i, sd..]).assign(&Array1::from(mapped));
    }
    Ok(x)
}

/// Mini-batch of DDPG transitions as matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    pub terminal: Vec<bool>,
}

impl Batch {
    pub fn from_transitions(ts: &[&Transition]) -> Result<Self> {
        let first = ts.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
        let (sd, ad) = (first.state.len(), first.action.len());
        let b = ts.len();
        let mut states = Array2::zeros((b, sd));
        let mut actions = Array2::zeros((b, ad));
        let mut next_states = Array2::zeros((b, sd));
        for (i, t) in ts.iter().enumerate() {
            if t.state.len() != sd || t.next_state.len() != sd || t.action.len() != ad {
                return Err(Error::Contract("transitions in one batch differ in shape".into()));
            }
            states.row_mut(i).assign(&ndarray::aview1(&t.state));
            actions.row_mut(i).assign(&ndarray::aview1(&t.action));
            next_states.row_mut(i).assign(&ndarray::aview1(&t.next_state));
        }
        Ok(Self {
            states,
            actions,
            rewards: ts.iter().map(|t| t.reward).collect(),
            next_states,
            terminal: ts.iter().map(|t| t.terminal).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// `Q̂ = r + γ·Q′(s′, μ′(s′))`, or `r` for terminal samples.
pub fn critic_target(
    batch: &Batch,
    target_actor: &DenseNet,
    target_critic: &DenseNet,
    map: ActionMap,
    gamma: f64,
) -> Result<Array1<f64>> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let next_actions = target_actor.predict(batch.next_states.view())?;
    let inputs = critic_inputs(batch.next_states.view(), next_actions.view(), map)?;
    let q_next = target_critic.predict(inputs.view())?;
    Ok(Array1::from_iter((0..batch.len()).map(|i| {
        if batch.terminal[i] {
            batch.rewards[i]
        } else {
            batch.rewards[i] + gamma * q_next[(i, 0)]
        }
    })))
}

/// Mean squared TD error and its parameter gradient.
pub fn critic_gradient(critic: &DenseNet, inputs: ArrayView2<f64>, targets: &Array1<f64>) -> Result<(Gradients, f64)> {
    let cache = critic.forward_batch(inputs)?;
    let q = cache.output().column(0).to_owned();
    let err = &q - targets;
    let n = targets.len() as f64;
    let loss = err.mapv(|e| e * e).sum() / n;
    let dy = (err * (2.0 / n)).insert_axis(Axis(1));
    Ok((critic.backward(&cache, dy.view())?, loss))
}

/// Gradient of `−mean_b Q(s_b, map(μ(s_b)))` with respect to the actor
/// parameters, and the mean `Q`. The critic's input gradient is restricted
/// to its action slice and pulled back through the action map.
pub fn actor_gradient(
    actor: &DenseNet,
    critic: &DenseNet,
    map: ActionMap,
    states: ArrayView2<f64>,
) -> Result<(Gradients, f64)> {
    let a_cache = actor.forward_batch(states)?;
    let raw = a_cache.output().clone();
    let inputs = critic_inputs(states, raw.view(), map)?;
    let c_cache = critic.forward_batch(inputs.view())?;
    let b = states.nrows() as f64;
    let mean_q = c_cache.output().sum() / b;
    let dq = Array2::from_elem((states.nrows(), 1), -1.0 / b);
    let g_in = critic.backward(&c_cache, dq.view())?.input;
    let sd = states.ncols();
    let mut g_raw = Array2::zeros(raw.dim());
    for i in 0..raw.nrows() {
        let g_action = g_in.slice(s![i, sd..]).to_vec();
        let pulled = map.vjp(raw.row(i).as_slice().expect("standard layout"), &g_action)?;
        g_raw.row_mut(i).assign(&Array1::from(pulled));
    }
    Ok((actor.backward(&a_cache, g_raw.view())?, mean_q))
}

#[derive(Debug, Clone)]
pub struct Ddpg {
    pub cfg: DdpgConfig,
    pub projector: Projector,
    pub actor: DenseNet,
    pub critic: DenseNet,
    pub actor_target: DenseNet,
    pub critic_target: DenseNet,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
    pub replay: ReplayBuffer<Transition>,
    pub rng: ChaCha8Rng,
    pub noise_std: f64,
    pub env_steps: u64,
    pub updates: u64,
}

impl Ddpg {
    pub fn new(cfg: DdpgConfig, state_dim: usize, projector: Projector, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let action_dim = projector.action_len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(AGENT_STREAM);
        let mut actor_sizes = vec![state_dim];
        actor_sizes.extend(&cfg.hidden);
        actor_sizes.push(action_dim);
        let mut critic_sizes = vec![state_dim + action_dim];
        critic_sizes.extend(&cfg.hidden);
        critic_sizes.push(1);
        let actor = DenseNet::new(&actor_sizes, Activation::Relu, Activation::Tanh, Some(3e-3), &mut rng)?;
        let critic = DenseNet::new(&critic_sizes, Activation::Relu, Activation::Linear, None, &mut rng)?;
        Ok(Self {
            actor_opt: Adam::new(&actor, cfg.actor_lr),
            critic_opt: Adam::new(&critic, cfg.critic_lr),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            replay: ReplayBuffer::new(cfg.buffer_capacity)?,
            rng,
            noise_std: cfg.noise_std_initial,
            env_steps: 0,
            updates: 0,
            projector,
            cfg,
        })
    }

    fn map(&self) -> ActionMap<'_> {
        ActionMap::Projected(&self.projector)
    }

    /// One critic step on `batch`. Returns the loss before the step.
    pub fn critic_update(&mut self, batch: &Batch) -> Result<(f64, StepOutcome)> {
        let targets = critic_target(batch, &self.actor_target, &self.critic_target, self.map(), self.cfg.gamma)?;
        let inputs = critic_inputs(batch.states.view(), batch.actions.view(), self.map())?;
        let (g, loss) = critic_gradient(&self.critic, inputs.view(), &targets)?;
        if !loss.is_finite() {
            return Ok((loss, StepOutcome::SkippedNonFinite));
        }
        Ok((loss, self.critic_opt.step(&mut self.critic, &g)?))
    }

    /// One actor step on the states of `batch`. Returns the mean `Q` before
    /// the step.
    pub fn actor_update(&mut self, batch: &Batch) -> Result<(f64, StepOutcome)> {
        let (g, mean_q) = actor_gradient(&self.actor, &self.critic, self.map(), batch.states.view())?;
        Ok((mean_q, self.actor_opt.step(&mut self.actor, &g)?))
    }

    fn decide(&self, state: &State, raw: Vec<f64>) -> Result<(Vec<f64>, BeamformingAction)> {
        match self.projector.project(&raw) {
            Ok(a) => Ok((raw, a)),
            Err(Error::DegenerateAction(_)) => Ok((state.prev_action.to_real(), state.prev_action.clone())),
            Err(e) => Err(e),
        }
    }

    /// Writes networks, optimizer moments, normalizer and RNG state as JSON
    /// and the replay buffer as a little-endian binary file.
    pub fn save_checkpoint(&self, dir: &Path, normalizer: &Normalizer, next_episode: usize) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let state = CheckpointRef {
            config: &self.cfg,
            projector: &self.projector,
            actor: &self.actor,
            critic: &self.critic,
            actor_target: &self.actor_target,
            critic_target: &self.critic_target,
            actor_opt: &self.actor_opt,
            critic_opt: &self.critic_opt,
            rng: &self.rng,
            noise_std: self.noise_std,
            env_steps: self.env_steps,
            updates: self.updates,
            normalizer,
            next_episode,
        };
        let f = BufWriter::new(File::create(dir.join(CHECKPOINT_FILE))?);
        serde_json::to_writer(f, &state).map_err(|e| Error::Checkpoint(e.to_string()))?;
        write_replay(&dir.join(REPLAY_FILE), &self.replay)
    }

    /// Inverse of [`Ddpg::save_checkpoint`].
    pub fn load_checkpoint(dir: &Path) -> Result<(Self, Normalizer, usize)> {
        let f = BufReader::new(File::open(dir.join(CHECKPOINT_FILE))?);
        let c: Checkpoint = serde_json::from_reader(f).map_err(|e| Error::Checkpoint(e.to_string()))?;
        c.config.validate()?;
        let replay = read_replay(&dir.join(REPLAY_FILE))?;
        if replay.capacity() != c.config.buffer_capacity {
            return Err(Error::Checkpoint("replay capacity differs from the stored configuration".into()));
        }
        let a_sizes = c.actor.layer_sizes();
        if c.critic.input_size() != a_sizes[0] + c.projector.action_len()
            || c.actor.output_size() != c.projector.action_len()
            || !c.actor.same_architecture(&c.actor_target)
            || !c.critic.same_architecture(&c.critic_target)
        {
            return Err(Error::Checkpoint("network shapes are inconsistent".into()));
        }
        Ok((
            Self {
                cfg: c.config,
                projector: c.projector,
                actor: c.actor,
                critic: c.critic,
                actor_target: c.actor_target,
                critic_target: c.critic_target,
                actor_opt: c.actor_opt,
                critic_opt: c.critic_opt,
                replay,
                rng: c.rng,
                noise_std: c.noise_std,
                env_steps: c.env_steps,
                updates: c.updates,
            },
            c.normalizer,
            c.next_episode,
        ))
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const REPLAY_FILE: &str = "replay.bin";
const REPLAY_MAGIC: &[u8; 8] = b"ISACRPL1";

#[derive(Serialize)]
struct CheckpointRef<'a> {
    config: &'a DdpgConfig,
    projector: &'a Projector,
    actor: &'a DenseNet,
    critic: &'a DenseNet,
    actor_target: &'a DenseNet,
    critic_target: &'a DenseNet,
    actor_opt: &'a Adam,
    critic_opt: &'a Adam,
    rng: &'a ChaCha8Rng,
    noise_std: f64,
    env_steps: u64,
    updates: u64,
    normalizer: &'a Normalizer,
    next_episode: usize,
}

#[derive(Deserialize)]
struct Checkpoint {
    config: DdpgConfig,
    projector: Projector,
    actor: DenseNet,
    critic: DenseNet,
    actor_target: DenseNet,
    critic_target: DenseNet,
    actor_opt: Adam,
    critic_opt: Adam,
    rng: ChaCha8Rng,
    noise_std: f64,
    env_steps: u64,
    updates: u64,
    normalizer: Normalizer,
    next_episode: usize,
}

/// Layout: magic, then `capacity, next, len, state_dim, action_dim` as u64,
/// then `len` records of `state, action, reward, next_state` as f64 and a
/// terminal byte, all little-endian, in storage order.
fn write_replay(path: &Path, buf: &ReplayBuffer<Transition>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let (sd, ad) = buf
        .items
        .first()
        .map(|t| (t.state.len(), t.action.len()))
        .unwrap_or((0, 0));
    w.write_all(REPLAY_MAGIC)?;
    for v in [buf.capacity, buf.next, buf.items.len(), sd, ad] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    for t in &buf.items {
        for x in t.state.iter().chain(&t.action).chain(std::iter::once(&t.reward)).chain(&t.next_state) {
            w.write_all(&x.to_le_bytes())?;
        }
        w.write_all(&[t.terminal as u8])?;
    }
    w.flush()?;
    Ok(())
}

fn read_replay(path: &Path) -> Result<ReplayBuffer<Transition>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != REPLAY_MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a replay file", path.display())));
    }
    let mut u64s = [0usize; 5];
    for v in &mut u64s {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        *v = u64::from_le_bytes(b) as usize;
    }
    let [capacity, next, len, sd, ad] = u64s;
    if capacity == 0 || len > capacity || next >= capacity {
        return Err(Error::Checkpoint("corrupt replay header".into()));
    }
    fn f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            out.push(f64::from_le_bytes(b));
        }
        Ok(out)
    }
    let mut items = Vec::with_capacity(len);
    for _ in 0..len {
        let state = f64s(&mut r, sd)?;
        let action = f64s(&mut r, ad)?;
        let reward = f64s(&mut r, 1)?[0];
        let next_state = f64s(&mut r, sd)?;
        let mut t = [0u8; 1];
        r.read_exact(&mut t)?;
        items.push(Transition {
            state,
            action,
            reward,
            next_state,
            terminal: t[0] != 0,
        });
    }
    Ok(ReplayBuffer { items, capacity, next })
}

impl Policy for Ddpg {
    fn name(&self) -> &'static str {
        "ddpg"
    }

    fn greedy(&self, state: &State) -> Result<BeamformingAction> {
        let mut raw = self.actor.predict_one(&state.features)?;
        raw.iter_mut().for_each(|x| *x = x.clamp(-1.0, 1.0));
        Ok(self.decide(state, raw)?.1)
    }
}

impl Learner for Ddpg {
    type Record = Vec<f64>;

    fn explore(&mut self, state: &State) -> Result<Decision<Vec<f64>>> {
        let start = Instant::now();
        let raw = act(&self.actor, &state.features, self.noise_std, &mut self.rng)?;
        let (record, action) = self.decide(state, raw)?;
        Ok(Decision {
            record,
            action,
            latency: start.elapsed(),
        })
    }

    fn learn(&mut self, t: Transition) -> Result<LearnInfo> {
        self.replay.push(t);
        self.env_steps += 1;
        let mut info = LearnInfo::default();
        if self.replay.len() >= self.cfg.batch_size {
            let batch = {
                let sample = self.replay.sample(&mut self.rng, self.cfg.batch_size);
                Batch::from_transitions(&sample)?
            };
            let (loss, c) = self.critic_update(&batch)?;
            let (_, a) = self.actor_update(&batch)?;
            info.updated = true;
            info.critic_loss = Some(loss);
            info.skipped = c == StepOutcome::SkippedNonFinite || a == StepOutcome::SkippedNonFinite;
            self.updates += 1;
        }
        if self.env_steps.is_multiple_of(self.cfg.target_update_interval as u64) {
            soft_update(&mut self.actor_target, &self.actor, self.cfg.tau)?;
            soft_update(&mut self.critic_target, &self.critic, self.cfg.tau)?;
        }
        self.noise_std *= 1.0 - self.cfg.noise_decay;
        Ok(info)
    }

    fn exploration(&self) -> f64 {
        self.noise_std
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::tests::rel_err;
    use crate::neural::Layer;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn replay_is_fifo() {
        let mut b = ReplayBuffer::new(5).unwrap();
        for i in 0..13 {
            b.push(i);
        }
        assert_eq!(b.len(), 5);
        assert_eq!(b.iter().copied().collect::<Vec<_>>(), vec![8, 9, 10, 11, 12]);
    }

    #[test]
    fn replay_sampling_is_uniform() {
        let mut b = ReplayBuffer::new(100).unwrap();
        (0..100).for_each(|i| b.push(i));
        let mut counts = [0usize; 100];
        let mut r = rng(1);
        for &i in b.sample(&mut r, 100_000) {
            counts[i] += 1;
        }
        assert!(counts.iter().all(|&c| (850..=1150).contains(&c)), "{counts:?}");
    }

    #[test]
    fn deterministic_action_without_noise() {
        let mut r = rng(2);
        let actor = DenseNet::new(&[4, 8, 6], Activation::Relu, Activation::Tanh, None, &mut r).unwrap();
        let s = [0.1, 0.2, -0.3, 0.4];
        assert_eq!(act(&actor, &s, 0.0, &mut r).unwrap(), act(&actor, &s, 0.0, &mut r).unwrap());
        for _ in 0..100 {
            assert!(act(&actor, &s, 5.0, &mut r).unwrap().iter().all(|x| x.abs() <= 1.0));
        }
    }

    #[test]
    fn noise_decays_geometrically() {
        let cfg = DdpgConfig {
            hidden: vec![8],
            batch_size: 1000,
            ..DdpgConfig::default()
        };
        let p = Projector::new(2, 1, 1.0, 1.0).unwrap();
        let mut agent = Ddpg::new(cfg, 3, p, 0).unwrap();
        for _ in 0..1000 {
            agent
                .learn(Transition {
                    state: vec![0.0; 3],
                    action: vec![1.0; 8],
                    reward: 0.0,
                    next_state: vec![0.0; 3],
                    terminal: false,
                })
                .unwrap();
        }
        assert_relative_eq!(agent.noise_std, 0.1 * (1.0 - 1e-5f64).powi(1000), max_relative = 1e-12);
    }

    fn tiny_batch(terminal: bool) -> Batch {
        Batch {
            states: array![[0.5, -0.5]],
            actions: array![[1.0, 0.0]],
            rewards: array![1.0],
            next_states: array![[0.1, 0.2]],
            terminal: vec![terminal],
        }
    }

    /// Critic that outputs the constant `q`.
    fn constant_critic(inputs: usize, q: f64) -> DenseNet {
        DenseNet::from_layers(vec![Layer {
            weights: Array2::zeros((1, inputs)),
            bias: array![q],
            activation: Activation::Linear,
        }])
        .unwrap()
    }

    #[test]
    fn critic_target_examples() {
        let mut r = rng(3);
        let actor = DenseNet::new(&[2, 4, 2], Activation::Relu, Activation::Tanh, None, &mut r).unwrap();
        let critic = constant_critic(4, 2.0);
        let t = critic_target(&tiny_batch(false), &actor, &critic, ActionMap::Identity, 0.5).unwrap();
        assert_eq!(t[0], 2.0);
        let t = critic_target(&tiny_batch(false), &actor, &critic, ActionMap::Identity, 0.0).unwrap();
        assert_eq!(t[0], 1.0);
        let t = critic_target(&tiny_batch(true), &actor, &critic, ActionMap::Identity, 0.5).unwrap();
        assert_eq!(t[0], 1.0);
    }

    #[test]
    fn perfect_critic_has_zero_loss_and_gradient() {
        let critic = constant_critic(4, 1.5);
        let x = Array2::from_elem((3, 4), 0.3);
        let (g, loss) = critic_gradient(&critic, x.view(), &array![1.5, 1.5, 1.5]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.flat().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn critic_loss_matches_recomputation() {
        let mut r = rng(4);
        let critic = DenseNet::new(&[5, 7, 1], Activation::Relu, Activation::Linear, None, &mut r).unwrap();
        let x = uniform(&mut r, 6, 5);
        let y = Array1::from_iter((0..6).map(|i| i as f64 * 0.1));
        let (_, loss) = critic_gradient(&critic, x.view(), &y).unwrap();
        let mut expected = 0.0;
        for i in 0..6 {
            let q = critic.predict_one(x.row(i).as_slice().unwrap()).unwrap()[0];
            expected += (q - y[i]).powi(2);
        }
        assert_relative_eq!(loss, expected / 6.0, max_relative = 1e-13);
    }

    #[test]
    fn critic_gradient_matches_finite_differences() {
        let mut r = rng(5);
        let critic = DenseNet::new(&[5, 7, 6, 1], Activation::Relu, Activation::Linear, None, &mut r).unwrap();
        let x = uniform(&mut r, 4, 5);
        let y = Array1::from_iter((0..4).map(|i| i as f64));
        let (g, _) = critic_gradient(&critic, x.view(), &y).unwrap();
        let base = critic.params();
        let mut probe = critic.clone();
        for (i, gi) in g.flat().iter().enumerate() {
            let mut p = base.clone();
            p[i] += 1e-5;
            probe.set_params(&p).unwrap();
            let up = critic_gradient(&probe, x.view(), &y).unwrap().1;
            p[i] -= 2e-5;
            probe.set_params(&p).unwrap();
            let dn = critic_gradient(&probe, x.view(), &y).unwrap().1;
            assert!(rel_err(*gi, (up - dn) / 2e-5) < 1e-4);
        }
    }

    #[test]
    fn critic_overfits_one_transition() {
        let cfg = DdpgConfig {
            gamma: 0.0,
            hidden: vec![16, 16],
            critic_lr: 1e-3,
            ..DdpgConfig::default()
        };
        let p = Projector::new(2, 1, 1.0, 1.0).unwrap();
        let mut agent = Ddpg::new(cfg, 2, p, 6).unwrap();
        let batch = Batch {
            states: array![[0.5, -0.5]],
            actions: array![[1.0, 0.0, 0.5, 0.0, 0.0, 0.2, 0.0, 0.3]],
            rewards: array![2.5],
            next_states: array![[0.1, 0.2]],
            terminal: vec![false],
        };
        for _ in 0..5000 {
            agent.critic_update(&batch).unwrap();
        }
        let (loss, _) = agent.critic_update(&batch).unwrap();
        assert!(loss.sqrt() < 1e-3, "td error {}", loss.sqrt());
    }

    /// Critic `Q(s, a) = cᵀa`.
    fn linear_action_critic(state_dim: usize, c: &[f64]) -> DenseNet {
        let mut w = Array2::zeros((1, state_dim + c.len()));
        for (i, ci) in c.iter().enumerate() {
            w[(0, state_dim + i)] = *ci;
        }
        DenseNet::from_layers(vec![Layer {
            weights: w,
            bias: array![0.0],
            activation: Activation::Linear,
        }])
        .unwrap()
    }

    fn fd_actor_objective(actor: &DenseNet, critic: &DenseNet, map: ActionMap, states: &Array2<f64>) -> Vec<f64> {
        let objective = |net: &DenseNet| -> f64 {
            let a = net.predict(states.view()).unwrap();
            let x = critic_inputs(states.view(), a.view(), map).unwrap();
            -critic.predict(x.view()).unwrap().mean().unwrap()
        };
        let base = actor.params();
        let mut probe = actor.clone();
        (0..base.len())
            .map(|i| {
                let mut p = base.clone();
                p[i] += 1e-5;
                probe.set_params(&p).unwrap();
                let up = objective(&probe);
                p[i] -= 2e-5;
                probe.set_params(&p).unwrap();
                let dn = objective(&probe);
                (up - dn) / 2e-5
            })
            .collect()
    }

    #[test]
    fn actor_gradient_with_linear_critic_matches_finite_differences() {
        let mut r = rng(7);
        let actor = DenseNet::new(&[3, 6, 4], Activation::Tanh, Activation::Tanh, None, &mut r).unwrap();
        let c = [0.3, -1.2, 0.7, 0.1];
        let critic = linear_action_critic(3, &c);
        let states = uniform(&mut r, 5, 3);
        let (g, _) = actor_gradient(&actor, &critic, ActionMap::Identity, states.view()).unwrap();
        // backprop of c through μ, averaged and negated
        let cache = actor.forward_batch(states.view()).unwrap();
        let dy = Array2::from_shape_fn((5, 4), |(_, j)| -c[j] / 5.0);
        let direct = actor.backward(&cache, dy.view()).unwrap();
        for (a, b) in g.flat().iter().zip(direct.flat()) {
            assert_relative_eq!(*a, b, max_relative = 1e-12);
        }
        let fd = fd_actor_objective(&actor, &critic, ActionMap::Identity, &states);
        for (a, b) in g.flat().iter().zip(&fd) {
            assert!(rel_err(*a, *b) < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn projected_actor_gradient_matches_finite_differences() {
        let mut r = rng(8);
        let p = Projector::new(2, 1, 2.0, 2.0).unwrap();
        let actor = DenseNet::new(&[3, 6, 8], Activation::Relu, Activation::Tanh, None, &mut r).unwrap();
        let critic = DenseNet::new(&[11, 9, 1], Activation::Tanh, Activation::Linear, None, &mut r).unwrap();
        let states = uniform(&mut r, 4, 3);
        let map = ActionMap::Projected(&p);
        let (g, _) = actor_gradient(&actor, &critic, map, states.view()).unwrap();
        let fd = fd_actor_objective(&actor, &critic, map, &states);
        for (a, b) in g.flat().iter().zip(&fd) {
            assert!(rel_err(*a, *b) < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_critic_gradient_leaves_actor_unchanged() {
        let p = Projector::new(2, 1, 1.0, 1.0).unwrap();
        let cfg = DdpgConfig {
            hidden: vec![8],
            actor_lr: 1e-2,
            ..DdpgConfig::default()
        };
        let mut agent = Ddpg::new(cfg, 2, p, 9).unwrap();
        agent.critic = constant_critic(10, 3.0);
        let before = agent.actor.params();
        let (q, _) = agent.actor_update(&tiny_batch(false)).unwrap();
        assert_eq!(q, 3.0);
        assert_eq!(agent.actor.params(), before);
    }

    #[test]
    fn target_lag_follows_soft_update_rate() {
        let mut r = rng(10);
        let train = DenseNet::new(&[4, 5, 2], Activation::Relu, Activation::Tanh, None, &mut r).unwrap();
        let mut target = DenseNet::new(&[4, 5, 2], Activation::Relu, Activation::Tanh, None, &mut r).unwrap();
        let gap = |t: &DenseNet| -> f64 {
            t.params().iter().zip(train.params()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        };
        let g0 = gap(&target);
        for _ in 0..1000 {
            soft_update(&mut target, &train, 1e-6).unwrap();
        }
        assert_relative_eq!(gap(&target) / g0, (1.0 - 1e-6f64).powi(1000), max_relative = 1e-9);
    }

    #[test]
    fn replay_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = ReplayBuffer::new(3).unwrap();
        for i in 0..5 {
            b.push(Transition {
                state: vec![i as f64, 1.0 / 3.0],
                action: vec![-0.1 * i as f64],
                reward: f64::MIN_POSITIVE * i as f64,
                next_state: vec![0.5, i as f64],
                terminal: i % 2 == 0,
            });
        }
        let path = dir.path().join("r.bin");
        write_replay(&path, &b).unwrap();
        assert_eq!(read_replay(&path).unwrap(), b);
        std::fs::write(&path, b"garbage!").unwrap();
        assert!(matches!(read_replay(&path), Err(Error::Checkpoint(_)) | Err(Error::Io(_))));
    }
}
