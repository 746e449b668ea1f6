//! Comparison policies: uniform random beams, the matched-filter pseudo
//! policy and a DQN over a steered-beam codebook with quantized power.
//!
//! The DQN factors its action into one beam-selection head and one
//! power-level head per beam (users first, sensing beam last). All heads
//! share a trunk; each head is trained towards its own one-step target with
//! its own max over the next state.

use std::f64::consts::{FRAC_PI_2, TAU};
use std::time::Instant;

use nalgebra::DVector;
use ndarray::{Array2, Axis};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::agent::{Decision, LearnInfo, Learner, Policy, ReplayBuffer, AGENT_STREAM};
use crate::array::{steering_vector, ArrayGeometry, Direction};
use crate::env::{mrt_action, Projector, State, Transition};
use crate::error::{Error, Result};
use crate::metrics::BeamformingAction;
use crate::neural::{Activation, Adam, DenseNet, StepOutcome};

/// I.i.d. standard Gaussian real and imaginary parts, projected onto the
/// power budget. An all-zero draw is redrawn.
pub fn random_policy<R: Rng + ?Sized>(rng: &mut R, projector: &Projector) -> Result<BeamformingAction> {
    loop {
        let raw: Vec<f64> = (0..projector.action_len()).map(|_| StandardNormal.sample(rng)).collect();
        match projector.project(&raw) {
            Err(Error::DegenerateAction(_)) => continue,
            other => return other,
        }
    }
}

/// Random beams. Greedy decisions draw from a generator keyed by the
/// state's episode and step so they are reproducible without shared state.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    pub projector: Projector,
    pub seed: u64,
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(projector: Projector, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(AGENT_STREAM);
        Self { projector, seed, rng }
    }
}

impl Policy for RandomPolicy {
    fn name(&self) -> &'static str {
        "random"
    }

    fn greedy(&self, state: &State) -> Result<BeamformingAction> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((state.episode_index as u64) << 16) ^ state.step_index as u64);
        random_policy(&mut rng, &self.projector)
    }
}

impl Learner for RandomPolicy {
    type Record = ();

    fn explore(&mut self, _state: &State) -> Result<Decision<()>> {
        let start = Instant::now();
        let action = random_policy(&mut self.rng, &self.projector)?;
        Ok(Decision {
            record: (),
            action,
            latency: start.elapsed(),
        })
    }

    fn learn(&mut self, _t: Transition<()>) -> Result<LearnInfo> {
        Ok(LearnInfo::default())
    }

    fn exploration(&self) -> f64 {
        1.0
    }
}

/// Matched-filter beams on the observed channels with equal per-beam power.
#[derive(Debug, Clone, Copy)]
pub struct MrtPolicy {
    pub p_max: f64,
}

impl Policy for MrtPolicy {
    fn name(&self) -> &'static str {
        "mrt"
    }

    fn greedy(&self, state: &State) -> Result<BeamformingAction> {
        mrt_action(&state.snapshot, self.p_max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub beams: Vec<DVector<Complex64>>,
    pub directions: Vec<Direction>,
}

impl Codebook {
    pub fn len(&self) -> usize {
        self.beams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beams.is_empty()
    }
}

/// Steering vectors on an elevation × azimuth grid: elevations
/// `(i+1)·(π/2)/n_el`, `i < n_el`, and `size/n_el` azimuths evenly spaced
/// from 0. Elevation-major order.
pub fn build_codebook(geometry: &ArrayGeometry, size: usize, n_elevations: usize) -> Result<Codebook> {
    if size == 0 || n_elevations == 0 || !size.is_multiple_of(n_elevations) {
        return Err(Error::InvalidArgument(format!(
            "codebook size {size} does not factor into {n_elevations} elevations"
        )));
    }
    let n_az = size / n_elevations;
    let mut beams = Vec::with_capacity(size);
    let mut directions = Vec::with_capacity(size);
    for i in 0..n_elevations {
        let theta = (i + 1) as f64 * FRAC_PI_2 / n_elevations as f64;
        for k in 0..n_az {
            let d = Direction::new(theta, TAU * k as f64 / n_az as f64)?;
            beams.push(steering_vector(geometry, d));
            directions.push(d);
        }
    }
    Ok(Codebook { beams, directions })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DqnConfig {
    pub codebook_size: usize,
    pub codebook_elevations: usize,
    pub power_levels: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Environment steps over which ε falls linearly to `epsilon_end`.
    pub epsilon_decay_steps: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    /// Environment steps between hard target copies.
    pub target_update_interval: usize,
    pub hidden: Vec<usize>,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            codebook_size: 512,
            codebook_elevations: 8,
            power_levels: 10,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_steps: 2000,
            learning_rate: 1e-4,
            gamma: 0.5,
            buffer_capacity: 100_000,
            batch_size: 32,
            target_update_interval: 100,
            hidden: vec![400, 300],
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.power_levels < 2 || self.codebook_size == 0 {
            return bad("dqn.power_levels must be at least 2 and dqn.codebook_size at least 1");
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) || !(0.0..=1.0).contains(&self.epsilon_end) {
            return bad("dqn epsilon values must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gamma) || self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return bad("dqn.gamma must lie in [0, 1] and dqn.learning_rate be positive");
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 || self.target_update_interval == 0 {
            return bad("dqn batch, buffer and target interval must be at least 1");
        }
        if self.hidden.contains(&0) {
            return bad("dqn.hidden layer widths must be positive");
        }
        Ok(())
    }
}

/// Action indices: `[beam index per beam…, power level index per beam…]`.
pub type DqnRecord = Vec<usize>;

#[derive(Debug, Clone)]
pub struct Dqn {
    pub cfg: DqnConfig,
    pub codebook: Codebook,
    pub projector: Projector,
    pub net: DenseNet,
    pub target: DenseNet,
    pub opt: Adam,
    pub replay: ReplayBuffer<Transition<DqnRecord>>,
    pub rng: ChaCha8Rng,
    pub env_steps: u64,
}

impl Dqn {
    pub fn new(cfg: DqnConfig, state_dim: usize, geometry: &ArrayGeometry, projector: Projector, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if geometry.n_elements() != projector.n_tx {
            return Err(Error::InvalidConfig("codebook geometry differs from the transmit array".into()));
        }
        let codebook = build_codebook(geometry, cfg.codebook_size, cfg.codebook_elevations)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(AGENT_STREAM);
        let n_beams = projector.n_users + 1;
        let mut sizes = vec![state_dim];
        sizes.extend(&cfg.hidden);
        sizes.push(n_beams * (cfg.codebook_size + cfg.power_levels));
        let net = DenseNet::new(&sizes, Activation::Relu, Activation::Linear, None, &mut rng)?;
        Ok(Self {
            opt: Adam::new(&net, cfg.learning_rate),
            target: net.clone(),
            net,
            replay: ReplayBuffer::new(cfg.buffer_capacity)?,
            rng,
            env_steps: 0,
            codebook,
            projector,
            cfg,
        })
    }

    pub fn n_beams(&self) -> usize {
        self.projector.n_users + 1
    }

    /// `(offset, width)` of every head in the output vector.
    pub fn heads(&self) -> Vec<(usize, usize)> {
        let (c, l, n) = (self.cfg.codebook_size, self.cfg.power_levels, self.n_beams());
        (0..n)
            .map(|b| (b * c, c))
            .chain((0..n).map(|b| (n * c + b * l, l)))
            .collect()
    }

    pub fn epsilon(&self) -> f64 {
        let frac = if self.cfg.epsilon_decay_steps == 0 {
            1.0
        } else {
            (self.env_steps as f64 / self.cfg.epsilon_decay_steps as f64).min(1.0)
        };
        self.cfg.epsilon_start + (self.cfg.epsilon_end - self.cfg.epsilon_start) * frac
    }

    /// Beams scaled to `(ℓ/L)·P_max/(J+1)` for level `ℓ = index + 1`, then
    /// projected onto the budget.
    pub fn assemble(&self, record: &[usize]) -> Result<BeamformingAction> {
        let n = self.n_beams();
        if record.len() != 2 * n {
            return Err(Error::Contract(format!("expected {} action indices, got {}", 2 * n, record.len())));
        }
        let per_beam = self.projector.p_max / n as f64;
        let levels = self.cfg.power_levels as f64;
        let mut stacked = Vec::with_capacity(n * self.projector.n_tx);
        for b in 0..n {
            let beam = self
                .codebook
                .beams
                .get(record[b])
                .ok_or_else(|| Error::Contract(format!("beam index {} out of range", record[b])))?;
            if record[n + b] >= self.cfg.power_levels {
                return Err(Error::Contract(format!("power level index {} out of range", record[n + b])));
            }
            let amp = ((record[n + b] + 1) as f64 / levels * per_beam).sqrt();
            stacked.extend(beam.iter().map(|z| z * amp));
        }
        let raw = BeamformingAction::from_stacked(&stacked, self.projector.n_tx, self.projector.n_users)?.to_real();
        self.projector.project(&raw)
    }

    fn argmax_heads(&self, q: &[f64]) -> DqnRecord {
        self.heads()
            .into_iter()
            .map(|(o, w)| {
                let mut best = 0;
                for i in 1..w {
                    if q[o + i] > q[o + best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    /// Per-head ε-greedy selection.
    pub fn select<R: Rng + ?Sized>(&self, features: &[f64], epsilon: f64, rng: &mut R) -> Result<DqnRecord> {
        let q = self.net.predict_one(features)?;
        let greedy = self.argmax_heads(&q);
        Ok(self
            .heads()
            .into_iter()
            .zip(greedy)
            .map(|((_, w), g)| if rng.random::<f64>() < epsilon { rng.random_range(0..w) } else { g })
            .collect())
    }

    /// One TD step on a sampled batch. Returns the loss before the step.
    fn update(&mut self) -> Result<(f64, StepOutcome)> {
        let sample = self.replay.sample(&mut self.rng, self.cfg.batch_size);
        let b = sample.len();
        let sd = sample[0].state.len();
        let mut states = Array2::zeros((b, sd));
        let mut next = Array2::zeros((b, sd));
        for (i, t) in sample.iter().enumerate() {
            states.row_mut(i).assign(&ndarray::aview1(&t.state));
            next.row_mut(i).assign(&ndarray::aview1(&t.next_state));
        }
        let q_next = self.target.predict(next.view())?;
        let cache = self.net.forward_batch(states.view())?;
        let heads = self.heads();
        let scale = 1.0 / (b * heads.len()) as f64;
        let mut dy = Array2::zeros(cache.output().dim());
        let mut loss = 0.0;
        for (i, t) in sample.iter().enumerate() {
            for (h, &(o, w)) in heads.iter().enumerate() {
                let target = if t.terminal {
                    t.reward
                } else {
                    let best = q_next.row(i).slice(ndarray::s![o..o + w]).fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                    t.reward + self.cfg.gamma * best
                };
                let e = cache.output()[(i, o + t.action[h])] - target;
                loss += e * e * scale;
                dy[(i, o + t.action[h])] = 2.0 * e * scale;
            }
        }
        drop(sample);
        if !loss.is_finite() {
            return Ok((loss, StepOutcome::SkippedNonFinite));
        }
        let g = self.net.backward(&cache, dy.view())?;
        Ok((loss, self.opt.step(&mut self.net, &g)?))
    }

    /// Mean greedy Q over heads for a batch of states, for diagnostics.
    pub fn greedy_values(&self, states: &Array2<f64>) -> Result<Vec<f64>> {
        let q = self.net.predict(states.view())?;
        let heads = self.heads();
        Ok(q.axis_iter(Axis(0))
            .map(|row| {
                heads
                    .iter()
                    .map(|&(o, w)| row.slice(ndarray::s![o..o + w]).fold(f64::NEG_INFINITY, |m, &x| m.max(x)))
                    .sum::<f64>()
                    / heads.len() as f64
            })
            .collect())
    }
}

impl Policy for Dqn {
    fn name(&self) -> &'static str {
        "dqn"
    }

    fn greedy(&self, state: &State) -> Result<BeamformingAction> {
        let q = self.net.predict_one(&state.features)?;
        self.assemble(&self.argmax_heads(&q))
    }
}

impl Learner for Dqn {
    type Record = DqnRecord;

    fn explore(&mut self, state: &State) -> Result<Decision<DqnRecord>> {
        let start = Instant::now();
        let eps = self.epsilon();
        let mut rng = self.rng.clone();
        let record = self.select(&state.features, eps, &mut rng)?;
        self.rng = rng;
        let action = self.assemble(&record)?;
        Ok(Decision {
            record,
            action,
            latency: start.elapsed(),
        })
    }

    fn learn(&mut self, t: Transition<DqnRecord>) -> Result<LearnInfo> {
        self.replay.push(t);
        self.env_steps += 1;
        let mut info = LearnInfo::default();
        if self.replay.len() >= self.cfg.batch_size {
            let (loss, outcome) = self.update()?;
            info.updated = true;
            info.critic_loss = Some(loss);
            info.skipped = outcome == StepOutcome::SkippedNonFinite;
        }
        if self.env_steps.is_multiple_of(self.cfg.target_update_interval as u64) {
            self.target = self.net.clone();
        }
        Ok(info)
    }

    fn exploration(&self) -> f64 {
        self.epsilon()
    }
}
