//! Closed-form performance kernels for one channel snapshot and one set of
//! transmit beamformers.
//!
//! The sensing echo of communication beam `w_j` arrives along the target's
//! receive steering vector with power `|α₀|²·|b_txᴴ w_j|²`, so the receive
//! interference-plus-noise covariance is
//! `R = Σ_j |α₀|² (A w_j)(A w_j)ᴴ + σ_BS² I` with `A = b_rx b_txᴴ`. The
//! receive filter maximizing the sensing SINR is `u = R⁻¹ b_rx`.

use nalgebra::{Cholesky, DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::ChannelSnapshot;

/// Floor applied to the sensing SINR before taking its logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Transmit beamformers: one column per user plus a dedicated sensing beam.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformingAction {
    /// `N_tx × J`, column `j` is user `j`'s beam.
    pub comm_beams: DMatrix<Complex64>,
    pub sense_beam: DVector<Complex64>,
}

impl BeamformingAction {
    pub fn zeros(n_tx: usize, n_users: usize) -> Self {
        Self {
            comm_beams: DMatrix::zeros(n_tx, n_users),
            sense_beam: DVector::zeros(n_tx),
        }
    }

    pub fn n_tx(&self) -> usize {
        self.sense_beam.len()
    }

    pub fn n_users(&self) -> usize {
        self.comm_beams.ncols()
    }

    /// `Tr{W Wᴴ} + ‖w_s‖²`.
    pub fn total_power(&self) -> f64 {
        self.comm_beams.norm_squared() + self.sense_beam.norm_squared()
    }

    /// Per-beam powers, users first, sensing beam last.
    pub fn beam_powers(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.comm_beams.column_iter().map(|c| c.norm_squared()).collect();
        p.push(self.sense_beam.norm_squared());
        p
    }

    /// All beams stacked: `w_1, …, w_J, w_s`.
    pub fn to_stacked(&self) -> Vec<Complex64> {
        self.comm_beams.iter().chain(self.sense_beam.iter()).copied().collect()
    }

    pub fn from_stacked(stacked: &[Complex64], n_tx: usize, n_users: usize) -> Result<Self> {
        if stacked.len() != n_tx * (n_users + 1) {
            return Err(Error::Contract(format!(
                "expected {} stacked entries, got {}",
                n_tx * (n_users + 1),
                stacked.len()
            )));
        }
        let split = n_tx * n_users;
        Ok(Self {
            comm_beams: DMatrix::from_column_slice(n_tx, n_users, &stacked[..split]),
            sense_beam: DVector::from_column_slice(&stacked[split..]),
        })
    }

    /// Real encoding: real parts of the stacked beams, then imaginary parts.
    pub fn to_real(&self) -> Vec<f64> {
        split_complex(&self.to_stacked())
    }

    pub fn from_real(raw: &[f64], n_tx: usize, n_users: usize) -> Result<Self> {
        if !raw.len().is_multiple_of(2) {
            return Err(Error::Contract(format!("odd real action length {}", raw.len())));
        }
        Self::from_stacked(&join_complex(raw), n_tx, n_users)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            comm_beams: &self.comm_beams * Complex64::new(c, 0.0),
            sense_beam: &self.sense_beam * Complex64::new(c, 0.0),
        }
    }
}

/// `[Re z_0 … Re z_{n-1}, Im z_0 … Im z_{n-1}]`.
pub fn split_complex(z: &[Complex64]) -> Vec<f64> {
    z.iter().map(|c| c.re).chain(z.iter().map(|c| c.im)).collect()
}

/// Inverse of [`split_complex`].
pub fn join_complex(x: &[f64]) -> Vec<Complex64> {
    let n = x.len() / 2;
    (0..n).map(|i| Complex64::new(x[i], x[n + i])).collect()
}

/// SINR of user `j`.
pub fn comm_sinr(snap: &ChannelSnapshot, a: &BeamformingAction, j: usize) -> f64 {
    let h = &snap.user_channels[j];
    let mut signal = 0.0;
    let mut interference = snap.noise_power_user;
    for (jj, w) in a.comm_beams.column_iter().enumerate() {
        let g = h.dotc(&w).norm_sqr();
        if jj == j {
            signal = g;
        } else {
            interference += g;
        }
    }
    interference += h.dotc(&a.sense_beam).norm_sqr();
    signal / interference
}

pub fn comm_sinrs(snap: &ChannelSnapshot, a: &BeamformingAction) -> Vec<f64> {
    (0..snap.n_users()).map(|j| comm_sinr(snap, a, j)).collect()
}

/// `Σ_j log₂(1 + SINR_j)` in bits/s/Hz.
pub fn sum_spectral_efficiency(snap: &ChannelSnapshot, a: &BeamformingAction) -> f64 {
    comm_sinrs(snap, a).iter().map(|s| (1.0 + s).log2()).sum()
}

/// Echo interference-plus-noise covariance seen by the receive array.
pub fn interference_covariance(snap: &ChannelSnapshot, a: &BeamformingAction) -> DMatrix<Complex64> {
    let n_rx = snap.n_rx();
    let alpha2 = snap.sensing_gain.norm_sqr();
    let mut r = DMatrix::<Complex64>::identity(n_rx, n_rx) * Complex64::new(snap.noise_power_bs, 0.0);
    for w in a.comm_beams.column_iter() {
        // A w = b_rx (b_txᴴ w)
        let echo = &snap.b_rx_target * snap.b_tx_target.dotc(&w);
        r.gerc(Complex64::new(alpha2, 0.0), &echo, &echo, Complex64::new(1.0, 0.0));
    }
    r
}

fn covariance_factor(snap: &ChannelSnapshot, a: &BeamformingAction) -> Result<Cholesky<Complex64, nalgebra::Dyn>> {
    Cholesky::new(interference_covariance(snap, a))
        .ok_or_else(|| Error::Solver("interference covariance is not positive definite".into()))
}

/// Receive filter `R⁻¹ b_rx`, obtained from a Cholesky solve.
pub fn rq_receive_beamformer(snap: &ChannelSnapshot, a: &BeamformingAction) -> Result<DVector<Complex64>> {
    Ok(covariance_factor(snap, a)?.solve(&snap.b_rx_target))
}

/// Sensing SINR with the optimal receive filter:
/// `|α₀|² (b_rxᴴ R⁻¹ b_rx) |b_txᴴ w_s|²`.
pub fn sensing_sinr(snap: &ChannelSnapshot, a: &BeamformingAction) -> Result<f64> {
    let u = rq_receive_beamformer(snap, a)?;
    let quad = snap.b_rx_target.dotc(&u).re;
    Ok(snap.sensing_gain.norm_sqr() * quad * snap.b_tx_target.dotc(&a.sense_beam).norm_sqr())
}

/// Sensing SINR for an arbitrary receive filter `u`:
/// `|uᴴ α₀ A w_s|² / (uᴴ R u)`.
pub fn sensing_sinr_with_receiver(
    snap: &ChannelSnapshot,
    a: &BeamformingAction,
    u: &DVector<Complex64>,
) -> f64 {
    let r = interference_covariance(snap, a);
    let signal = u.dotc(&snap.b_rx_target) * snap.b_tx_target.dotc(&a.sense_beam) * snap.sensing_gain;
    signal.norm_sqr() / u.dotc(&(&r * u)).re
}

/// `ρ·Γ + (1−ρ)·log₁₀(max(ν_s, 1e-12))`.
pub fn reward(gamma_c: f64, nu_s: f64, rho: f64) -> f64 {
    rho * gamma_c + (1.0 - rho) * nu_s.max(LOG_FLOOR).log10()
}

/// Everything the environment reports about one action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Performance {
    pub sum_rate: f64,
    pub sensing_sinr: f64,
    pub reward: f64,
}

pub fn evaluate(snap: &ChannelSnapshot, a: &BeamformingAction, rho: f64) -> Result<Performance> {
    let sum_rate = sum_spectral_efficiency(snap, a);
    let sensing = sensing_sinr(snap, a)?;
    Ok(Performance {
        sum_rate,
        sensing_sinr: sensing,
        reward: reward(sum_rate, sensing, rho),
    })
}
