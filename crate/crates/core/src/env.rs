//! The decision process seen by the agents.
//!
//! One episode freezes one channel snapshot and runs `K` steps on it. The
//! state is the real/imaginary split of the observed user channels, the
//! target's transmit steering vector, the echo gain and the previous action,
//! passed through a running mean normalization. Actions leave the actor as a
//! raw real vector and are scaled onto the total power budget by
//! [`Projector`].

use std::sync::Arc;

use nalgebra::DVector;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, split_complex, BeamformingAction, Performance};
use crate::scenario::{episode_rng, ChannelSnapshot, Scenario};

/// Relative tolerance on the power equality accepted by [`Env::step`].
pub const POWER_TOLERANCE: f64 = 1e-6;
/// Number of observed states after which normalization statistics freeze.
pub const DEFAULT_NORMALIZER_WARMUP: u64 = 1000;
/// Divisor floor of the mean normalization.
pub const NORMALIZER_FLOOR: f64 = 1e-12;
const CAP_ROUNDS: usize = 5;

/// Length of the real action vector.
pub fn action_len(n_tx: usize, n_users: usize) -> usize {
    2 * n_tx * (n_users + 1)
}

/// Length of the state feature vector.
pub fn feature_len(n_tx: usize, n_users: usize) -> usize {
    2 * (n_tx * n_users + n_tx + 1 + n_tx * (n_users + 1))
}

/// Beams that share one scale factor after projection.
#[derive(Debug, Clone, PartialEq)]
struct Group {
    beams: Vec<usize>,
    power: f64,
}

/// Maps raw real action vectors onto beamformers with total power `p_max`
/// and, when `p_0 < p_max`, per-beam power at most `p_0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    pub n_tx: usize,
    pub n_users: usize,
    pub p_max: f64,
    pub p_0: f64,
}

impl Projector {
    pub fn new(n_tx: usize, n_users: usize, p_max: f64, p_0: f64) -> Result<Self> {
        if !(p_max > 0.0 && p_0 > 0.0 && p_max.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid power budget p_max={p_max}, p_0={p_0}")));
        }
        if p_0 * ((n_users + 1) as f64) < p_max {
            return Err(Error::InvalidArgument(format!(
                "per-beam cap {p_0} cannot reach total power {p_max}"
            )));
        }
        Ok(Self {
            n_tx,
            n_users,
            p_max,
            p_0,
        })
    }

    pub fn action_len(&self) -> usize {
        action_len(self.n_tx, self.n_users)
    }

    fn n_beams(&self) -> usize {
        self.n_users + 1
    }

    /// Real-layout indices of beam `b`.
    fn beam_indices(&self, b: usize) -> impl Iterator<Item = usize> {
        let half = self.n_tx * self.n_beams();
        let start = b * self.n_tx;
        (start..start + self.n_tx).chain(half + start..half + start + self.n_tx)
    }

    fn group_norm_sqr(&self, raw: &[f64], g: &Group) -> f64 {
        g.beams
            .iter()
            .flat_map(|&b| self.beam_indices(b))
            .map(|i| raw[i] * raw[i])
            .sum()
    }

    /// Splits the beams into groups with a common scale. Without an active
    /// cap there is one group holding the whole budget; otherwise beams
    /// that would exceed `p_0` are clipped to it one round at a time and
    /// the remainder is shared by the others.
    fn groups(&self, raw: &[f64]) -> Result<Vec<Group>> {
        if raw.len() != self.action_len() {
            return Err(Error::Contract(format!(
                "raw action has length {}, expected {}",
                raw.len(),
                self.action_len()
            )));
        }
        if raw.iter().any(|x| !x.is_finite()) {
            return Err(Error::DegenerateAction("raw action contains non-finite entries".into()));
        }
        let powers: Vec<f64> = (0..self.n_beams())
            .map(|b| self.beam_indices(b).map(|i| raw[i] * raw[i]).sum())
            .collect();
        let total: f64 = powers.iter().sum();
        if total == 0.0 {
            return Err(Error::DegenerateAction("raw action is all zeros".into()));
        }
        let all = Group {
            beams: (0..self.n_beams()).collect(),
            power: self.p_max,
        };
        if self.p_0 >= self.p_max {
            return Ok(vec![all]);
        }

        let mut clipped = vec![false; self.n_beams()];
        for _ in 0..CAP_ROUNDS {
            let n_clipped = clipped.iter().filter(|&&c| c).count();
            let remaining = self.p_max - n_clipped as f64 * self.p_0;
            let free: f64 = (0..self.n_beams()).filter(|&b| !clipped[b]).map(|b| powers[b]).sum();
            if free == 0.0 {
                break;
            }
            let scale = remaining / free;
            let mut changed = false;
            for b in 0..self.n_beams() {
                if !clipped[b] && powers[b] * scale > self.p_0 * (1.0 + 1e-12) {
                    clipped[b] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }

        let mut groups = Vec::new();
        let mut free = Vec::new();
        for b in 0..self.n_beams() {
            if clipped[b] {
                if powers[b] == 0.0 {
                    return Err(Error::DegenerateAction(format!("beam {b} has zero power")));
                }
                groups.push(Group {
                    beams: vec![b],
                    power: self.p_0,
                });
            } else {
                free.push(b);
            }
        }
        let remaining = self.p_max - groups.len() as f64 * self.p_0;
        if !free.is_empty() {
            let g = Group {
                beams: free,
                power: remaining,
            };
            if self.group_norm_sqr(raw, &g) > 0.0 {
                groups.push(g);
            } else if remaining > POWER_TOLERANCE * self.p_max {
                return Err(Error::DegenerateAction(
                    "power remaining after clipping has no beam to go to".into(),
                ));
            }
        }
        Ok(groups)
    }

    /// Projected action in the real layout.
    pub fn project_real(&self, raw: &[f64]) -> Result<Vec<f64>> {
        let groups = self.groups(raw)?;
        let mut out = vec![0.0; raw.len()];
        for g in &groups {
            let scale = (g.power / self.group_norm_sqr(raw, g)).sqrt();
            for i in g.beams.iter().flat_map(|&b| self.beam_indices(b)) {
                out[i] = raw[i] * scale;
            }
        }
        let total: f64 = out.iter().map(|x| x * x).sum();
        if (total - self.p_max).abs() > POWER_TOLERANCE * self.p_max {
            return Err(Error::DegenerateAction(format!(
                "projection reached total power {total}, budget is {}",
                self.p_max
            )));
        }
        Ok(out)
    }

    pub fn project(&self, raw: &[f64]) -> Result<BeamformingAction> {
        BeamformingAction::from_real(&self.project_real(raw)?, self.n_tx, self.n_users)
    }

    /// `Jᵀ g` for the Jacobian `J` of [`Projector::project_real`] at `raw`.
    ///
    /// Within a group scaled to power `P`, `y = √P · v / ‖v‖`, whose
    /// transposed Jacobian is `√P/‖v‖ · (g − v̂ (v̂·g))`.
    pub fn vjp(&self, raw: &[f64], g: &[f64]) -> Result<Vec<f64>> {
        if g.len() != raw.len() {
            return Err(Error::Contract("gradient and action lengths differ".into()));
        }
        let groups = self.groups(raw)?;
        let mut out = vec![0.0; raw.len()];
        for grp in &groups {
            let idx: Vec<usize> = grp.beams.iter().flat_map(|&b| self.beam_indices(b)).collect();
            let norm = self.group_norm_sqr(raw, grp).sqrt();
            let radial: f64 = idx.iter().map(|&i| raw[i] * g[i]).sum::<f64>() / norm;
            let scale = grp.power.sqrt() / norm;
            for &i in &idx {
                out[i] = scale * (g[i] - raw[i] / norm * radial);
            }
        }
        Ok(out)
    }
}

/// Scales `raw` onto total power `p_max` with no per-beam cap.
pub fn project_power(raw: &[f64], n_tx: usize, n_users: usize, p_max: f64) -> Result<BeamformingAction> {
    Projector::new(n_tx, n_users, p_max, p_max)?.project(raw)
}

/// Matched-filter beams: `w_j ∝ h_j`, `w_s ∝ b_tx`, each with power
/// `p_max/(J+1)`.
pub fn mrt_action(snap: &ChannelSnapshot, p_max: f64) -> Result<BeamformingAction> {
    let j = snap.n_users();
    let per_beam = (p_max / (j + 1) as f64).sqrt();
    let unit = |v: &DVector<Complex64>| -> Result<DVector<Complex64>> {
        let n = v.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::DegenerateAction("matched filter of a zero channel".into()));
        }
        Ok(v * Complex64::new(per_beam / n, 0.0))
    };
    let mut a = BeamformingAction::zeros(snap.n_tx(), j);
    for (jj, h) in snap.user_channels.iter().enumerate() {
        a.comm_beams.set_column(jj, &unit(h)?);
    }
    a.sense_beam = unit(&snap.b_tx_target)?;
    Ok(a)
}

/// Raw, unnormalized state features.
pub fn raw_features(snap: &ChannelSnapshot, prev: &BeamformingAction) -> Vec<f64> {
    let mut z: Vec<Complex64> = Vec::with_capacity(feature_len(snap.n_tx(), snap.n_users()) / 2);
    for h in &snap.user_channels {
        z.extend(h.iter());
    }
    z.extend(snap.b_tx_target.iter());
    z.push(snap.sensing_gain);
    z.extend(prev.to_stacked());
    split_complex(&z)
}

/// Running mean normalization `x ← (x − mean)/(max − min)`.
///
/// The mean is an exponential moving average seeded by the first sample;
/// min and max are running extrema. Statistics stop changing once
/// `warmup` samples have been seen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub count: u64,
    pub frozen: bool,
    pub warmup: u64,
    pub decay: f64,
}

impl Normalizer {
    pub fn new(dim: usize, warmup: u64) -> Self {
        Self {
            mean: vec![0.0; dim],
            min: vec![0.0; dim],
            max: vec![0.0; dim],
            count: 0,
            frozen: warmup == 0,
            warmup,
            decay: 0.999,
        }
    }

    /// Fixed statistics, never updated.
    pub fn fixed(mean: Vec<f64>, min: Vec<f64>, max: Vec<f64>) -> Self {
        Self {
            mean,
            min,
            max,
            count: 1,
            frozen: true,
            warmup: 0,
            decay: 0.999,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Folds `x` into the statistics. Returns `false` when frozen.
    pub fn update(&mut self, x: &[f64]) -> bool {
        if self.frozen {
            return false;
        }
        if self.count == 0 {
            self.mean.copy_from_slice(x);
            self.min.copy_from_slice(x);
            self.max.copy_from_slice(x);
        } else {
            let d = self.decay;
            for (i, &v) in x.iter().enumerate() {
                self.mean[i] = d * self.mean[i] + (1.0 - d) * v;
                self.min[i] = self.min[i].min(v);
                self.max[i] = self.max[i].max(v);
            }
        }
        self.count += 1;
        if self.count >= self.warmup {
            self.frozen = true;
        }
        true
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        if self.count == 0 {
            return x.to_vec();
        }
        x.iter()
            .enumerate()
            .map(|(i, &v)| (v - self.mean[i]) / (self.max[i] - self.min[i]).max(NORMALIZER_FLOOR))
            .collect()
    }
}

/// Normalized network input for `(snap, prev)`.
pub fn encode_state(snap: &ChannelSnapshot, prev: &BeamformingAction, norm: &Normalizer) -> Vec<f64> {
    norm.apply(&raw_features(snap, prev))
}

#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub features: Vec<f64>,
    /// Channels as observed by the agent.
    pub snapshot: Arc<ChannelSnapshot>,
    pub prev_action: BeamformingAction,
    pub step_index: usize,
    pub episode_index: usize,
}

/// One replay record. For DDPG `action` is the raw actor output before
/// projection; discrete agents store their action indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition<A = Vec<f64>> {
    pub state: Vec<f64>,
    pub action: A,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    /// ISAC weight between sum rate and log sensing SINR.
    pub rho: f64,
    pub steps_per_episode: usize,
    pub normalizer_warmup: u64,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub next: State,
    pub reward: f64,
    pub performance: Performance,
    pub done: bool,
}

/// Episode loop over a shared scenario.
#[derive(Debug, Clone)]
pub struct Env {
    scenario: Arc<Scenario>,
    cfg: EnvConfig,
    stream: u64,
    projector: Projector,
    normalizer: Normalizer,
    truth: Option<Arc<ChannelSnapshot>>,
    state: Option<State>,
}

impl Env {
    pub fn new(scenario: Arc<Scenario>, cfg: EnvConfig, stream: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&cfg.rho) {
            return Err(Error::InvalidConfig(format!("rho must lie in [0, 1], got {}", cfg.rho)));
        }
        if cfg.steps_per_episode == 0 {
            return Err(Error::InvalidConfig("steps_per_episode must be at least 1".into()));
        }
        let sc = scenario.config();
        let projector = Projector::new(sc.n_tx, sc.n_users, sc.p_max, sc.p_0)?;
        let normalizer = Normalizer::new(feature_len(sc.n_tx, sc.n_users), cfg.normalizer_warmup);
        Ok(Self {
            scenario,
            cfg,
            stream,
            projector,
            normalizer,
            truth: None,
            state: None,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn scenario(&self) -> &Arc<Scenario> {
        &self.scenario
    }

    pub fn projector(&self) -> &Projector {
        &self.projector
    }

    pub fn feature_len(&self) -> usize {
        self.normalizer.dim()
    }

    pub fn action_len(&self) -> usize {
        self.projector.action_len()
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn set_normalizer(&mut self, normalizer: Normalizer) -> Result<()> {
        if normalizer.dim() != self.feature_len() {
            return Err(Error::Contract(format!(
                "normalizer has dimension {}, environment needs {}",
                normalizer.dim(),
                self.feature_len()
            )));
        }
        self.normalizer = normalizer;
        Ok(())
    }

    /// True channel snapshot of the current episode.
    pub fn snapshot(&self) -> Option<&Arc<ChannelSnapshot>> {
        self.truth.as_ref()
    }

    pub fn state(&self) -> Option<&State> {
        self.state.as_ref()
    }

    fn observe(&mut self, snap: &ChannelSnapshot, prev: &BeamformingAction) -> Vec<f64> {
        let raw = raw_features(snap, prev);
        self.normalizer.update(&raw);
        self.normalizer.apply(&raw)
    }

    /// Starts episode `t` with the matched-filter warm start as the previous
    /// action.
    pub fn reset(&mut self, t: usize) -> Result<State> {
        let sc = self.scenario.config();
        let mut rng = episode_rng(sc.rng_seed, self.stream, t);
        let truth = Arc::new(self.scenario.draw_channel(t, &mut rng)?);
        let observed = if sc.csi_noise_std > 0.0 {
            Arc::new(perturb_channels(&truth, sc.csi_noise_std, &mut rng))
        } else {
            Arc::clone(&truth)
        };
        let prev = mrt_action(&observed, sc.p_max)?;
        let features = self.observe(&observed, &prev);
        let state = State {
            features,
            snapshot: observed,
            prev_action: prev,
            step_index: 0,
            episode_index: t,
        };
        self.truth = Some(truth);
        self.state = Some(state.clone());
        Ok(state)
    }

    /// Applies a projected action. The reward is computed on the true
    /// channels; the last step of the episode is terminal.
    pub fn step(&mut self, action: &BeamformingAction) -> Result<StepOutcome> {
        let (state, truth) = match (&self.state, &self.truth) {
            (Some(s), Some(t)) => (s.clone(), Arc::clone(t)),
            _ => return Err(Error::Contract("step before reset".into())),
        };
        if state.step_index >= self.cfg.steps_per_episode {
            return Err(Error::Contract("step after the end of the episode".into()));
        }
        if action.n_tx() != truth.n_tx() || action.n_users() != truth.n_users() {
            return Err(Error::Contract("action dimensions do not match the scenario".into()));
        }
        let p_max = self.projector.p_max;
        let power = action.total_power();
        if !((power - p_max).abs() <= POWER_TOLERANCE * p_max) {
            return Err(Error::Contract(format!(
                "action power {power} violates the budget {p_max}"
            )));
        }
        let performance = metrics::evaluate(&truth, action, self.cfg.rho)?;
        if !performance.reward.is_finite() {
            return Err(Error::NonFinite {
                what: "reward".into(),
                episode: state.episode_index,
                step: state.step_index,
            });
        }
        let features = self.observe(&state.snapshot, action);
        let next = State {
            features,
            snapshot: Arc::clone(&state.snapshot),
            prev_action: action.clone(),
            step_index: state.step_index + 1,
            episode_index: state.episode_index,
        };
        let done = next.step_index == self.cfg.steps_per_episode;
        self.state = Some(next.clone());
        Ok(StepOutcome {
            next,
            reward: performance.reward,
            performance,
            done,
        })
    }
}

/// Adds `CN(0, std²)` noise to every user channel entry.
fn perturb_channels<R: Rng + ?Sized>(snap: &ChannelSnapshot, std: f64, rng: &mut R) -> ChannelSnapshot {
    let mut out = snap.clone();
    let s = std * std::f64::consts::FRAC_1_SQRT_2;
    for h in &mut out.user_channels {
        for z in h.iter_mut() {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            *z += Complex64::new(s * re, s * im);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{ScenarioConfig, TRAIN_STREAM};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    fn desk_env(rho: f64, k: usize) -> Env {
        desk_env_with_warmup(rho, k, 100)
    }

    fn desk_env_with_warmup(rho: f64, k: usize, warmup: u64) -> Env {
        let cfg = ScenarioConfig::table_defaults(39e9).desk_scale();
        let sc = Arc::new(Scenario::new(cfg).unwrap());
        Env::new(
            sc,
            EnvConfig {
                rho,
                steps_per_episode: k,
                normalizer_warmup: warmup,
            },
            TRAIN_STREAM,
        )
        .unwrap()
    }

    #[test]
    fn projection_scales_down_by_half() {
        let p = Projector::new(2, 1, 1.0, 1.0).unwrap();
        // total raw power 4
        let raw = [1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0];
        let y = p.project_real(&raw).unwrap();
        for (a, b) in y.iter().zip(raw) {
            assert_eq!(*a, b / 2.0);
        }
        assert_relative_eq!(p.project(&raw).unwrap().total_power(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn projection_of_feasible_action_is_identity() {
        let p = Projector::new(4, 2, 2.5, 2.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raw = p.project_real(&gaussian(&mut rng, 24)).unwrap();
        let again = p.project_real(&raw).unwrap();
        for (a, b) in again.iter().zip(&raw) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn zero_action_is_degenerate() {
        assert!(matches!(
            project_power(&[0.0; 12], 2, 2, 1.0),
            Err(Error::DegenerateAction(_))
        ));
        assert!(matches!(
            project_power(&[0.0; 10], 2, 2, 1.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn projection_gradient_annihilates_the_input_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Projector::new(8, 2, 1.0, 1.0).unwrap();
        for _ in 0..50 {
            let v = gaussian(&mut rng, 48);
            let jt = p.vjp(&v, &v).unwrap();
            assert!(jt.iter().all(|x| x.abs() < 1e-10));
        }
    }

    fn fd_vjp(p: &Projector, v: &[f64], g: &[f64]) -> Vec<f64> {
        let f = |x: &[f64]| -> f64 {
            p.project_real(x).unwrap().iter().zip(g).map(|(a, b)| a * b).sum()
        };
        (0..v.len())
            .map(|i| {
                let h = 1e-6;
                let mut up = v.to_vec();
                up[i] += h;
                let mut dn = v.to_vec();
                dn[i] -= h;
                (f(&up) - f(&dn)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn projection_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p0 in [1.0, 0.45] {
            let p = Projector::new(3, 2, 1.0, p0).unwrap();
            for _ in 0..20 {
                let v = gaussian(&mut rng, 18);
                let g = gaussian(&mut rng, 18);
                let exact = p.vjp(&v, &g).unwrap();
                let fd = fd_vjp(&p, &v, &g);
                for (a, b) in exact.iter().zip(&fd) {
                    assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "p0={p0}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn per_beam_cap_is_enforced() {
        let p = Projector::new(4, 3, 1.0, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let mut v = gaussian(&mut rng, 32);
            // make beam 0 dominant
            for i in p.beam_indices(0).collect::<Vec<_>>() {
                v[i] *= 10.0;
            }
            let a = p.project(&v).unwrap();
            assert_relative_eq!(a.total_power(), 1.0, max_relative = 1e-12);
            for pb in a.beam_powers() {
                assert!(pb <= 0.3 * (1.0 + 1e-9));
            }
        }
    }

    #[test]
    fn state_length_at_full_scale() {
        assert_eq!(feature_len(16, 4), 322);
        let cfg = ScenarioConfig::table_defaults(39e9);
        let sc = Scenario::new(cfg).unwrap();
        let snap = sc.snapshot(0, TRAIN_STREAM).unwrap();
        let prev = mrt_action(&snap, 1.0).unwrap();
        assert_eq!(raw_features(&snap, &prev).len(), 322);
    }

    #[test]
    fn unit_range_normalizer_halves_values() {
        let n = feature_len(8, 2);
        let norm = Normalizer::fixed(vec![0.0; n], vec![-1.0; n], vec![1.0; n]);
        let sc = Scenario::new(ScenarioConfig::table_defaults(39e9).desk_scale()).unwrap();
        let snap = sc.snapshot(3, TRAIN_STREAM).unwrap();
        let prev = mrt_action(&snap, 1.0).unwrap();
        let raw = raw_features(&snap, &prev);
        let enc = encode_state(&snap, &prev, &norm);
        for (e, r) in enc.iter().zip(&raw) {
            assert_eq!(*e, r / 2.0);
        }
        assert_eq!(enc, encode_state(&snap, &prev, &norm));
    }

    #[test]
    fn normalizer_statistics() {
        let mut n = Normalizer::new(2, 10);
        n.update(&[3.0, -1.0]);
        assert_eq!((n.mean.clone(), n.min.clone(), n.max.clone()), (vec![3.0, -1.0], vec![3.0, -1.0], vec![3.0, -1.0]));
        n.update(&[3.0, 1.0]);
        assert_eq!(n.min, vec![3.0, -1.0]);
        assert_eq!(n.max, vec![3.0, 1.0]);
        assert_eq!(n.mean[0], 3.0);
        // constant coordinate: divisor floor keeps the output finite
        assert_eq!(n.apply(&[3.0, 0.0])[0], 0.0);
        assert!(n.apply(&[4.0, 0.0])[0] > 1e11);
        for i in 0..2 {
            assert!(n.min[i] <= n.mean[i] && n.mean[i] <= n.max[i]);
        }
    }

    #[test]
    fn normalizer_freezes_after_warmup() {
        let mut n = Normalizer::new(1, 3);
        for x in [1.0, 2.0, 3.0] {
            assert!(n.update(&[x]));
        }
        assert!(n.frozen);
        let before = n.clone();
        assert!(!n.update(&[100.0]));
        assert_eq!(n, before);
    }

    #[test]
    fn reset_is_reproducible_and_feasible() {
        let mut a = desk_env(0.2, 10);
        let mut b = desk_env(0.2, 10);
        let sa = a.reset(17).unwrap();
        let sb = b.reset(17).unwrap();
        assert_eq!(sa, sb);
        assert_relative_eq!(sa.prev_action.total_power(), 1.0, max_relative = 1e-9);
        assert_eq!(sa.step_index, 0);
        assert_eq!(sa.features.len(), feature_len(8, 2));
    }

    #[test]
    fn reset_past_trajectory_end_clamps_target() {
        let mut env = desk_env(0.2, 10);
        let s = env.reset(1_000_000).unwrap();
        let last = *env.scenario().config().target_waypoints.last().unwrap();
        let d = nalgebra::Vector3::from(last.position).norm();
        assert_relative_eq!(s.snapshot.target_distance, d, max_relative = 1e-12);
    }

    #[test]
    fn episode_length_and_terminal_flag() {
        let mut env = desk_env(0.2, 20);
        let s = env.reset(0).unwrap();
        let a = s.prev_action.clone();
        for k in 0..20 {
            let out = env.step(&a).unwrap();
            assert_eq!(out.done, k == 19);
            assert_eq!(out.next.step_index, k + 1);
        }
        assert!(matches!(env.step(&a), Err(Error::Contract(_))));
    }

    #[test]
    fn communication_only_reward_is_sum_rate() {
        let mut env = desk_env(1.0, 5);
        let s = env.reset(4).unwrap();
        let out = env.step(&s.prev_action).unwrap();
        let snap = env.snapshot().unwrap();
        assert_eq!(out.reward, metrics::sum_spectral_efficiency(snap, &s.prev_action));
    }

    #[test]
    fn reward_matches_out_of_loop_recomputation() {
        let mut env = desk_env(0.2, 5);
        let s = env.reset(9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw = gaussian(&mut rng, env.action_len());
        let a = env.projector().project(&raw).unwrap();
        let out = env.step(&a).unwrap();

        let sc = Scenario::new(ScenarioConfig::table_defaults(39e9).desk_scale()).unwrap();
        let snap = sc.snapshot(9, TRAIN_STREAM).unwrap();
        let expected = metrics::reward(
            metrics::sum_spectral_efficiency(&snap, &a),
            metrics::sensing_sinr(&snap, &a).unwrap(),
            0.2,
        );
        assert_relative_eq!(out.reward, expected, max_relative = 1e-12);
        assert!(Arc::ptr_eq(&out.next.snapshot, &s.snapshot));
        assert_eq!(out.next.prev_action, a);
    }

    #[test]
    fn power_violation_is_rejected() {
        let mut env = desk_env(0.2, 5);
        let s = env.reset(0).unwrap();
        let a = s.prev_action.scaled(1.01);
        assert!(matches!(env.step(&a), Err(Error::Contract(_))));
        assert!(matches!(desk_env(0.2, 5).step(&s.prev_action), Err(Error::Contract(_))));
    }

    #[test]
    fn fixed_actions_reproduce_rewards_bitwise() {
        let run = || {
            let mut env = desk_env(0.2, 10);
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let mut rewards = Vec::new();
            for t in 0..3 {
                env.reset(t).unwrap();
                for _ in 0..10 {
                    let a = env.projector().project(&gaussian(&mut rng, 48)).unwrap();
                    rewards.push(env.step(&a).unwrap().reward.to_bits());
                }
            }
            rewards
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn csi_noise_only_changes_observations() {
        let mut cfg = ScenarioConfig::table_defaults(39e9).desk_scale();
        cfg.csi_noise_std = 1e-6;
        let sc = Arc::new(Scenario::new(cfg).unwrap());
        let env_cfg = EnvConfig {
            rho: 0.2,
            steps_per_episode: 3,
            normalizer_warmup: 10,
        };
        let mut env = Env::new(sc.clone(), env_cfg, TRAIN_STREAM).unwrap();
        let s = env.reset(2).unwrap();
        let truth = sc.snapshot(2, TRAIN_STREAM).unwrap();
        assert_eq!(**env.snapshot().unwrap(), truth);
        assert_ne!(s.snapshot.user_channels, truth.user_channels);
    }

    #[test]
    fn features_are_well_scaled_after_warmup() {
        let mut env = desk_env_with_warmup(0.2, 10, DEFAULT_NORMALIZER_WARMUP);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut inside = 0usize;
        let mut total = 0usize;
        let mut probed = 0;
        for t in 0.. {
            if probed == 100 {
                break;
            }
            let s = env.reset(t).unwrap();
            let mut feats = vec![s.features];
            for _ in 0..10 {
                let a = env.projector().project(&gaussian(&mut rng, 48)).unwrap();
                feats.push(env.step(&a).unwrap().next.features);
            }
            if env.normalizer().frozen {
                probed += 1;
                for f in feats.iter().flatten() {
                    assert!(f.is_finite());
                    total += 1;
                    inside += (f.abs() <= 3.0) as usize;
                }
            }
        }
        assert!(total > 0);
        assert!(inside as f64 >= 0.95 * total as f64, "{inside}/{total}");
    }

    proptest! {
        #[test]
        fn projection_meets_budget_and_is_scale_free(
            seed in any::<u64>(),
            p_max in 0.01f64..100.0,
            capped in any::<bool>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p0 = if capped { p_max * 0.4 } else { p_max };
            let p = Projector::new(4, 2, p_max, p0).unwrap();
            let v = gaussian(&mut rng, 24);
            let y = p.project(&v).unwrap();
            prop_assert!((y.total_power() - p_max).abs() <= 1e-9 * p_max);
            let base = p.project_real(&v).unwrap();
            for c in [0.1, 1.0, 10.0] {
                let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
                let yc = p.project_real(&scaled).unwrap();
                for (a, b) in yc.iter().zip(&base) {
                    prop_assert!((a - b).abs() <= 1e-12 * p_max.sqrt().max(1.0));
                }
            }
        }
    }
}
