//! Von Mises messages over scaled direction cosines and the 3-D Gaussian
//! location belief.
//!
//! A message over a direction cosine `θ ∈ [-1, 1]` is a Von Mises density in
//! the angle `πθ`. Products and quotients are carried out on the natural
//! parameter `κ e^{jμ}`, where they reduce to complex addition and
//! subtraction.

use std::f64::consts::PI;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::channel::C64;
use crate::error::{domain, Result};
use crate::geometry::{wrap_pi, Vec3};

/// Upper bound on message concentration. Only guards against overflow: the
/// extrinsic division needs posterior and prior concentrations at full
/// precision even at very high SNR.
pub const KAPPA_MAX: f64 = 1e100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VonMisesMessage {
    /// Mean direction of `πθ`, in `[-π, π)`.
    pub mu: f64,
    /// Concentration, `≥ 0`.
    pub kappa: f64,
}

impl Default for VonMisesMessage {
    fn default() -> Self {
        Self::uniform()
    }
}

impl VonMisesMessage {
    pub fn new(mu: f64, kappa: f64) -> Self {
        Self {
            mu: wrap_pi(mu),
            kappa: kappa.clamp(0.0, KAPPA_MAX),
        }
    }

    pub fn uniform() -> Self {
        Self { mu: 0.0, kappa: 0.0 }
    }

    /// Message centred on direction cosine `theta`.
    pub fn at_theta(theta: f64, kappa: f64) -> Self {
        Self::new(PI * theta, kappa)
    }

    pub fn is_uniform(&self) -> bool {
        self.kappa == 0.0
    }

    /// Natural parameter `κ e^{jμ}`.
    pub fn natural(&self) -> C64 {
        C64::from_polar(self.kappa, self.mu)
    }

    pub fn from_natural(z: C64) -> Self {
        let kappa = z.norm();
        if kappa == 0.0 || !kappa.is_finite() {
            return Self::uniform();
        }
        Self::new(z.arg(), kappa)
    }

    /// Pointwise product of two densities (up to normalization).
    pub fn multiply(&self, other: &Self) -> Self {
        Self::from_natural(self.natural() + other.natural())
    }

    /// Extrinsic part of a posterior: `posterior / prior`.
    pub fn extrinsic(posterior: &Self, prior: &Self) -> Self {
        let d = posterior.natural() - prior.natural();
        if d.re == 0.0 && d.im == 0.0 {
            Self::uniform()
        } else {
            Self::from_natural(d)
        }
    }

    /// Mode expressed as a direction cosine, `μ / π`, clipped to `[-1, 1]`.
    pub fn mode_theta(&self) -> f64 {
        (self.mu / PI).clamp(-1.0, 1.0)
    }

    /// Unnormalized log density at direction cosine `theta`.
    pub fn log_density(&self, theta: f64) -> f64 {
        self.kappa * (PI * theta - self.mu).cos()
    }
}

pub fn vm_multiply(a: &VonMisesMessage, b: &VonMisesMessage) -> VonMisesMessage {
    a.multiply(b)
}

pub fn vm_extrinsic(post: &VonMisesMessage, prior: &VonMisesMessage) -> VonMisesMessage {
    VonMisesMessage::extrinsic(post, prior)
}

pub fn vm_mode_theta(msg: &VonMisesMessage) -> f64 {
    msg.mode_theta()
}

/// Gaussian belief over the UE position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianBelief3 {
    pub mean: Vec3,
    pub cov: Matrix3<f64>,
}

impl GaussianBelief3 {
    /// Rejects covariances that are asymmetric (beyond `1e-12` relative) or
    /// not positive definite.
    pub fn new(mean: Vec3, cov: Matrix3<f64>) -> Result<Self> {
        if !mean.iter().chain(cov.iter()).all(|v| v.is_finite()) {
            return Err(domain("belief has non-finite entries"));
        }
        let scale = cov.amax().max(f64::MIN_POSITIVE);
        if (cov - cov.transpose()).amax() > 1e-12 * scale {
            return Err(domain("belief covariance is not symmetric"));
        }
        let sym = (cov + cov.transpose()) * 0.5;
        if sym.cholesky().is_none() {
            return Err(domain("belief covariance is not positive definite"));
        }
        Ok(Self { mean, cov: sym })
    }
}
