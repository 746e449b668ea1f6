//! Time-evolving ISAC environment: fixed users and scattering clusters, a
//! moving point target, and per-episode channel realizations.
//!
//! The base station sits at the origin with its transmit and receive UCAs
//! co-located. Every episode `t` freezes one [`ChannelSnapshot`], drawn from a
//! random stream keyed by `(seed, stream, t)` so any episode can be
//! regenerated in isolation.

use std::f64::consts::{PI, TAU};

use nalgebra::{DVector, Vector3};
use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::array::{self, steering_vector, ArrayGeometry, Direction};
use crate::error::{Error, Result};

/// Random stream used for training episodes.
pub const TRAIN_STREAM: u64 = 0;
/// Random stream used for evaluation episodes.
pub const EVAL_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    /// Seconds since the start of the run.
    pub time: f64,
    /// Position in meters relative to the base station.
    pub position: [f64; 3],
}

/// Fully resolved scenario parameters in linear SI units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub carrier_frequency: f64,
    pub n_tx: usize,
    pub n_rx: usize,
    /// Adjacent-element chord spacing in carrier wavelengths.
    pub element_spacing: f64,
    pub n_users: usize,
    pub user_positions: Vec<[f64; 3]>,
    pub cluster_positions: Vec<[f64; 3]>,
    pub target_waypoints: Vec<Waypoint>,
    /// Allowed `[min, max]` target range in meters.
    pub target_distance_range: [f64; 2],
    /// Radar cross-section in m².
    pub rcs: f64,
    pub noise_power_user: f64,
    pub noise_power_bs: f64,
    pub p_max: f64,
    pub p_0: f64,
    pub slot_duration: f64,
    pub n_paths: usize,
    /// Extra attenuation of every scattered path, dB.
    pub nlos_loss_db: f64,
    /// Std-dev of additive noise on the channel estimates the agent observes.
    pub csi_noise_std: f64,
    pub rng_seed: u64,
}

impl ScenarioConfig {
    pub fn wavelength(&self) -> f64 {
        array::wavelength(self.carrier_frequency)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.carrier_frequency > 0.0) {
            return bad(format!("carrier_frequency must be positive, got {}", self.carrier_frequency));
        }
        if self.n_tx == 0 || self.n_rx == 0 {
            return bad("n_tx and n_rx must be at least 1".into());
        }
        if !(self.element_spacing > 0.0) {
            return bad("element_spacing must be positive".into());
        }
        if self.n_users == 0 || self.user_positions.len() != self.n_users {
            return bad(format!(
                "n_users = {} but {} user positions given",
                self.n_users,
                self.user_positions.len()
            ));
        }
        if self.n_paths != self.cluster_positions.len() + 1 {
            return bad(format!(
                "n_paths = {} requires {} clusters, found {}",
                self.n_paths,
                self.n_paths.saturating_sub(1),
                self.cluster_positions.len()
            ));
        }
        for (name, p) in [
            ("noise_power_user", self.noise_power_user),
            ("noise_power_bs", self.noise_power_bs),
            ("p_max", self.p_max),
            ("p_0", self.p_0),
            ("slot_duration", self.slot_duration),
        ] {
            if !(p > 0.0 && p.is_finite()) {
                return bad(format!("{name} must be positive, got {p}"));
            }
        }
        if self.p_0 > self.p_max {
            return bad(format!("p_0 ({}) exceeds p_max ({})", self.p_0, self.p_max));
        }
        if self.p_0 * ((self.n_users + 1) as f64) < self.p_max {
            return bad(format!(
                "per-beam cap p_0 = {} cannot reach p_max = {} with {} beams",
                self.p_0,
                self.p_max,
                self.n_users + 1
            ));
        }
        if self.rcs < 0.0 || self.csi_noise_std < 0.0 {
            return bad("rcs and csi_noise_std must be non-negative".into());
        }
        let [d_min, d_max] = self.target_distance_range;
        if !(d_min > 0.0 && d_min <= d_max) {
            return bad(format!("invalid target distance range [{d_min}, {d_max}]"));
        }
        if self.target_waypoints.is_empty() {
            return bad("target_waypoints is empty".into());
        }
        for w in self.target_waypoints.windows(2) {
            if !(w[1].time > w[0].time) {
                return bad("waypoint times must be strictly increasing".into());
            }
        }
        for (i, w) in self.target_waypoints.iter().enumerate() {
            let next = self.target_waypoints.get(i + 1).unwrap_or(w);
            let (lo, hi) = segment_distance_bounds(&w.position.into(), &next.position.into());
            if lo < d_min - 1e-9 || hi > d_max + 1e-9 {
                return bad(format!(
                    "target distance leaves [{d_min}, {d_max}] m on segment starting at t = {} s (range {lo:.3}..{hi:.3})",
                    w.time
                ));
            }
        }
        Ok(())
    }
}

/// Height of users, clusters and target relative to the array plane.
pub const GROUND_HEIGHT: f64 = -10.0;

const CLUSTER_LAYOUT_SEED: u64 = 0x15AC;

impl ScenarioConfig {
    /// Full-size defaults: 16-element arrays, four users, ten paths and the
    /// 100 s target loop.
    pub fn table_defaults(carrier_frequency: f64) -> Self {
        let n_paths = 10;
        Self {
            carrier_frequency,
            n_tx: 16,
            n_rx: 16,
            element_spacing: 0.5,
            n_users: 4,
            user_positions: default_user_positions(4, 150.0),
            cluster_positions: default_cluster_positions(n_paths - 1),
            target_waypoints: default_target_waypoints(),
            target_distance_range: [10.0, 150.0],
            rcs: 1.0,
            noise_power_user: dbm_to_watts(-103.0),
            noise_power_bs: dbm_to_watts(-103.0),
            p_max: dbm_to_watts(30.0),
            p_0: dbm_to_watts(30.0),
            slot_duration: 0.02,
            n_paths,
            nlos_loss_db: 10.0,
            csi_noise_std: 0.0,
            rng_seed: 0,
        }
    }

    /// Reduced problem: 8-element arrays and two users.
    pub fn desk_scale(mut self) -> Self {
        self.n_tx = 8;
        self.n_rx = 8;
        self.n_users = 2;
        self.user_positions = default_user_positions(2, 150.0);
        self
    }
}

/// Users on the ground at 3D range `distance`, spread evenly in azimuth over
/// 30°..150°.
pub fn default_user_positions(n_users: usize, distance: f64) -> Vec<[f64; 3]> {
    let horizontal = (distance * distance - GROUND_HEIGHT * GROUND_HEIGHT).max(0.0).sqrt();
    (0..n_users)
        .map(|j| {
            let az = if n_users == 1 {
                90f64
            } else {
                30.0 + 120.0 * j as f64 / (n_users - 1) as f64
            }
            .to_radians();
            [horizontal * az.cos(), horizontal * az.sin(), GROUND_HEIGHT]
        })
        .collect()
}

/// Clusters uniform over a 300 m square on the ground, at least 5 m from the
/// base station horizontally. The layout is fixed; it does not follow the run
/// seed.
pub fn default_cluster_positions(n: usize) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(CLUSTER_LAYOUT_SEED);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let x: f64 = rng.random_range(-150.0..150.0);
        let y: f64 = rng.random_range(-150.0..150.0);
        if x.hypot(y) >= 5.0 {
            out.push([x, y, GROUND_HEIGHT]);
        }
    }
    out
}

/// Closed 100 s loop: out at 100 m, in to 20 m, out to 140 m and back.
pub fn default_target_waypoints() -> Vec<Waypoint> {
    let at = |time: f64, r: f64, deg: f64| {
        let a = f64::to_radians(deg);
        Waypoint {
            time,
            position: [r * a.cos(), r * a.sin(), GROUND_HEIGHT],
        }
    };
    vec![
        at(0.0, 100.0, 240.0),
        at(20.0, 100.0, 270.0),
        at(45.0, 20.0, 300.0),
        at(70.0, 140.0, 320.0),
        at(100.0, 100.0, 240.0),
    ]
}

/// Smallest and largest distance from the origin along segment `a`–`b`.
fn segment_distance_bounds(a: &Vector3<f64>, b: &Vector3<f64>) -> (f64, f64) {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let s = if len2 > 0.0 {
        (-a.dot(&ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let closest = (a + ab * s).norm();
    (closest, a.norm().max(b.norm()))
}

/// Piecewise-linear target position at episode `t`, clamped to the first and
/// last waypoints.
pub fn target_position(cfg: &ScenarioConfig, t: usize) -> Result<Vector3<f64>> {
    let wps = &cfg.target_waypoints;
    let (first, last) = match (wps.first(), wps.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::InvalidConfig("target_waypoints is empty".into())),
    };
    let time = t as f64 * cfg.slot_duration;
    if time <= first.time {
        return Ok(first.position.into());
    }
    if time >= last.time {
        return Ok(last.position.into());
    }
    let i = wps.partition_point(|w| w.time <= time);
    let (a, b) = (&wps[i - 1], &wps[i]);
    let s = (time - a.time) / (b.time - a.time);
    let pa: Vector3<f64> = a.position.into();
    let pb: Vector3<f64> = b.position.into();
    Ok(pa + (pb - pa) * s)
}

/// Round-trip echo gain of a point target at range `d0`, including both
/// array gains and the two-way phase.
pub fn sensing_gain(d0: f64, rcs: f64, wavelength: f64, n_tx: usize, n_rx: usize) -> Result<Complex64> {
    if d0 <= 0.0 {
        return Err(Error::Singularity(format!("target range must be positive, got {d0}")));
    }
    if rcs < 0.0 {
        return Err(Error::InvalidArgument(format!("rcs must be non-negative, got {rcs}")));
    }
    let magnitude = ((n_tx * n_rx) as f64).sqrt() * rcs.sqrt() * wavelength
        / ((4.0 * PI).powf(1.5) * d0 * d0);
    let phase = -TAU * (2.0 * d0) / wavelength;
    Ok(Complex64::from_polar(magnitude, phase))
}

/// Random source for episode `t` of the given stream.
pub fn episode_rng(seed: u64, stream: u64, t: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 48) ^ t as u64);
    rng
}

/// One episode's frozen environment.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSnapshot {
    pub user_channels: Vec<DVector<Complex64>>,
    pub target_direction: Direction,
    pub b_tx_target: DVector<Complex64>,
    pub b_rx_target: DVector<Complex64>,
    pub sensing_gain: Complex64,
    pub target_distance: f64,
    pub episode_index: usize,
    pub noise_power_user: f64,
    pub noise_power_bs: f64,
}

impl ChannelSnapshot {
    pub fn n_tx(&self) -> usize {
        self.b_tx_target.len()
    }

    pub fn n_rx(&self) -> usize {
        self.b_rx_target.len()
    }

    pub fn n_users(&self) -> usize {
        self.user_channels.len()
    }
}

/// Precomputed geometry for a validated [`ScenarioConfig`].
#[derive(Debug, Clone)]
pub struct Scenario {
    cfg: ScenarioConfig,
    tx: ArrayGeometry,
    rx: ArrayGeometry,
    user_steering: Vec<DVector<Complex64>>,
    user_distance: Vec<f64>,
    cluster_steering: Vec<DVector<Complex64>>,
    /// `[user][cluster]` BS→cluster→user path length.
    scattered_length: Vec<Vec<f64>>,
}

impl Scenario {
    pub fn new(cfg: ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let lambda = cfg.wavelength();
        let tx = ArrayGeometry::uca(cfg.n_tx, cfg.element_spacing, lambda)?;
        let rx = ArrayGeometry::uca(cfg.n_rx, cfg.element_spacing, lambda)?;
        let users: Vec<Vector3<f64>> = cfg.user_positions.iter().map(|&p| p.into()).collect();
        let clusters: Vec<Vector3<f64>> = cfg.cluster_positions.iter().map(|&p| p.into()).collect();

        let mut user_steering = Vec::with_capacity(users.len());
        let mut user_distance = Vec::with_capacity(users.len());
        for u in &users {
            user_steering.push(steering_vector(&tx, Direction::towards(u)?));
            user_distance.push(u.norm());
        }
        let mut cluster_steering = Vec::with_capacity(clusters.len());
        for c in &clusters {
            cluster_steering.push(steering_vector(&tx, Direction::towards(c)?));
        }
        let scattered_length = users
            .iter()
            .map(|u| clusters.iter().map(|c| c.norm() + (u - c).norm()).collect())
            .collect();

        Ok(Self {
            cfg,
            tx,
            rx,
            user_steering,
            user_distance,
            cluster_steering,
            scattered_length,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn tx_geometry(&self) -> &ArrayGeometry {
        &self.tx
    }

    pub fn rx_geometry(&self) -> &ArrayGeometry {
        &self.rx
    }

    /// Line-of-sight transmit steering vector towards user `j`.
    pub fn user_steering(&self, j: usize) -> &DVector<Complex64> {
        &self.user_steering[j]
    }

    /// Snapshot for episode `t` from the configured seed and `stream`.
    pub fn snapshot(&self, t: usize, stream: u64) -> Result<ChannelSnapshot> {
        let mut rng = episode_rng(self.cfg.rng_seed, stream, t);
        self.draw_channel(t, &mut rng)
    }

    /// Draws user channels for episode `t` and attaches the target geometry.
    ///
    /// Per user, the line-of-sight coefficient has free-space amplitude and a
    /// uniform random phase; each cluster path has free-space amplitude over
    /// the bounced path length, a unit-variance complex Gaussian factor, and
    /// the configured scattering loss.
    pub fn draw_channel<R: Rng + ?Sized>(&self, t: usize, rng: &mut R) -> Result<ChannelSnapshot> {
        let lambda = self.cfg.wavelength();
        let sqrt_n = (self.cfg.n_tx as f64).sqrt();
        let eta = 10f64.powf(-self.cfg.nlos_loss_db / 20.0);
        let amplitude = |d: f64| lambda / (4.0 * PI * d);

        let mut user_channels = Vec::with_capacity(self.cfg.n_users);
        for j in 0..self.cfg.n_users {
            let psi: f64 = rng.random_range(0.0..TAU);
            let beta0 = Complex64::from_polar(amplitude(self.user_distance[j]), psi);
            let mut h = &self.user_steering[j] * beta0;
            for (l, b) in self.cluster_steering.iter().enumerate() {
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                let g = Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2;
                let beta = g * (amplitude(self.scattered_length[j][l]) * eta);
                h.axpy(beta, b, Complex64::new(1.0, 0.0));
            }
            h *= Complex64::new(sqrt_n, 0.0);
            user_channels.push(h);
        }

        let p0 = target_position(&self.cfg, t)?;
        let target_direction = Direction::towards(&p0)?;
        let d0 = p0.norm();
        Ok(ChannelSnapshot {
            user_channels,
            target_direction,
            b_tx_target: steering_vector(&self.tx, target_direction),
            b_rx_target: steering_vector(&self.rx, target_direction),
            sensing_gain: sensing_gain(d0, self.cfg.rcs, lambda, self.cfg.n_tx, self.cfg.n_rx)?,
            target_distance: d0,
            episode_index: t,
            noise_power_user: self.cfg.noise_power_user,
            noise_power_bs: self.cfg.noise_power_bs,
        })
    }
}

/// dBm to watts.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0) / 1000.0
}

/// Linear power ratio to dB.
pub fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}
