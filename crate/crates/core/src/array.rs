//! Antenna-array geometry and plane-wave steering vectors.
//!
//! Elements are isotropic. Uniform circular arrays lie in the `z = 0` plane,
//! centred on the origin, with element 0 on the positive x axis and the
//! remaining elements placed counter-clockwise.

use std::f64::consts::{PI, TAU};

use nalgebra::{DVector, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Propagation speed used to derive wavelengths from carrier frequencies.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub fn wavelength(carrier_frequency: f64) -> f64 {
    SPEED_OF_LIGHT / carrier_frequency
}

/// Elevation `theta` measured from +z and azimuth `phi` measured from +x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    pub theta: f64,
    pub phi: f64,
}

impl Direction {
    /// Builds a direction, wrapping `phi` into `[0, 2π)`.
    pub fn new(theta: f64, phi: f64) -> Result<Self> {
        if !(0.0..=PI).contains(&theta) || !phi.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "direction out of range: theta={theta}, phi={phi}"
            )));
        }
        let mut phi = phi.rem_euclid(TAU);
        if phi >= TAU {
            phi = 0.0;
        }
        Ok(Self { theta, phi })
    }

    /// Direction of the point `p` as seen from the origin.
    pub fn towards(p: &Vector3<f64>) -> Result<Self> {
        let r = p.norm();
        if r == 0.0 || !r.is_finite() {
            return Err(Error::Singularity(format!(
                "no direction towards point {:?}",
                p.as_slice()
            )));
        }
        let theta = (p.z / r).clamp(-1.0, 1.0).acos();
        Self::new(theta, p.y.atan2(p.x))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    element_positions: Vec<Vector3<f64>>,
    wavelength: f64,
}

impl ArrayGeometry {
    pub fn new(element_positions: Vec<Vector3<f64>>, wavelength: f64) -> Result<Self> {
        if element_positions.is_empty() {
            return Err(Error::InvalidArgument("array needs at least one element".into()));
        }
        if !(wavelength > 0.0 && wavelength.is_finite()) {
            return Err(Error::InvalidArgument(format!("wavelength must be positive, got {wavelength}")));
        }
        Ok(Self {
            element_positions,
            wavelength,
        })
    }

    /// UCA with `n` elements whose neighbours are `spacing_wavelengths`
    /// carrier wavelengths apart (chord distance).
    pub fn uca(n: usize, spacing_wavelengths: f64, wavelength: f64) -> Result<Self> {
        Self::new(uca_positions(n, spacing_wavelengths * wavelength)?, wavelength)
    }

    pub fn n_elements(&self) -> usize {
        self.element_positions.len()
    }

    pub fn element_positions(&self) -> &[Vector3<f64>] {
        &self.element_positions
    }

    pub fn wavelength(&self) -> f64 {
        self.wavelength
    }
}

/// Element positions of a uniform circular array.
///
/// Neighbouring elements are separated by the chord distance `spacing`, which
/// puts them on a circle of radius `spacing / (2 sin(π/n))`. A single element
/// sits at the origin.
pub fn uca_positions(n: usize, spacing: f64) -> Result<Vec<Vector3<f64>>> {
    if n == 0 {
        return Err(Error::InvalidArgument("UCA needs at least one element".into()));
    }
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(Error::InvalidArgument(format!("UCA spacing must be positive, got {spacing}")));
    }
    if n == 1 {
        return Ok(vec![Vector3::zeros()]);
    }
    let radius = spacing / (2.0 * (PI / n as f64).sin());
    Ok((0..n)
        .map(|i| {
            let a = TAU * i as f64 / n as f64;
            Vector3::new(radius * a.cos(), radius * a.sin(), 0.0)
        })
        .collect())
}

/// `(2π/λ)·[sinθ cosφ, sinθ sinφ, cosθ]`.
pub fn wavevector(d: Direction, wavelength: f64) -> Vector3<f64> {
    let k = TAU / wavelength;
    let (st, ct) = d.theta.sin_cos();
    let (sp, cp) = d.phi.sin_cos();
    Vector3::new(k * st * cp, k * st * sp, k * ct)
}

/// Unit-norm array response `(1/√N)·exp(i k·u_n)`.
pub fn steering_vector(g: &ArrayGeometry, d: Direction) -> DVector<Complex64> {
    let k = wavevector(d, g.wavelength);
    let scale = 1.0 / (g.n_elements() as f64).sqrt();
    DVector::from_iterator(
        g.n_elements(),
        g.element_positions
            .iter()
            .map(|u| Complex64::from_polar(scale, k.dot(u))),
    )
}
