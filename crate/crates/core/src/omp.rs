//! Single-atom matched-correlation search over a polar grid.
//!
//! Grid columns are near-field steering vectors generated on the fly, so
//! memory use does not depend on the grid size.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::aple::{EstimateFlags, LocationEstimate};
use crate::channel::{Snapshot, C64};
use crate::error::{config, Result};
use crate::geometry::{ArrayGeometry, PolarPoint, Vec3};
use crate::par;
use crate::vonmises::GaussianBelief3;

/// Default grid resolutions.
pub const RANGE_STEP: f64 = 0.1;
pub const ANGLE_STEP: f64 = 0.02;

/// Polar search grid. Every axis is a contiguous run of an absolute lattice
/// `origin + k · step`, so restricting a window never moves the nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarGrid {
    pub r: Vec<f64>,
    pub omega: Vec<f64>,
    pub phi: Vec<f64>,
    pub r_step: f64,
    pub angle_step: f64,
}

/// Inclusive interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub lo: f64,
    pub hi: f64,
}

fn lattice(origin: f64, step: f64, lo: f64, hi: f64, upper_open: Option<f64>) -> Vec<f64> {
    let k0 = ((lo - origin) / step - 1e-9).ceil().max(0.0) as i64;
    let k1 = ((hi - origin) / step + 1e-9).floor() as i64;
    (k0..=k1)
        .map(|k| origin + k as f64 * step)
        .filter(|v| upper_open.is_none_or(|u| *v < u - 1e-12))
        .collect()
}

impl PolarGrid {
    /// Full grid: range `[r_lo, r_hi]` at `RANGE_STEP` anchored on `r_lo`,
    /// azimuth over `[0, 2π)` and polar angle over `[0, π/2)` at `ANGLE_STEP`.
    pub fn full(r_lo: f64, r_hi: f64) -> Result<Self> {
        Self::windowed(r_lo, r_hi, None, None, None)
    }

    /// Default range bracket `[max(R_FS, 0.5 m), 1.5 R_FH]`.
    pub fn default_for(geom: &ArrayGeometry) -> Result<Self> {
        let b = geom.region_boundaries();
        Self::full(b.fresnel.max(0.5), 1.5 * b.fraunhofer)
    }

    /// Grid over the lattice anchored at `r_origin`, optionally restricted to
    /// windows on each axis. Azimuth windows may wrap past `2π`.
    pub fn windowed(
        r_origin: f64,
        r_hi: f64,
        r_window: Option<Window>,
        omega_window: Option<Window>,
        phi_window: Option<Window>,
    ) -> Result<Self> {
        Self::with_steps(r_origin, r_hi, RANGE_STEP, ANGLE_STEP, r_window, omega_window, phi_window)
    }

    pub fn with_steps(
        r_origin: f64,
        r_hi: f64,
        r_step: f64,
        angle_step: f64,
        r_window: Option<Window>,
        omega_window: Option<Window>,
        phi_window: Option<Window>,
    ) -> Result<Self> {
        if !(r_step > 0.0 && angle_step > 0.0) {
            return Err(config("grid steps must be positive"));
        }
        if !(r_origin > 0.0 && r_hi >= r_origin) {
            return Err(config(format!("invalid range bracket [{r_origin}, {r_hi}]")));
        }
        let rw = r_window.unwrap_or(Window { lo: r_origin, hi: r_hi });
        let r = lattice(r_origin, r_step, rw.lo.max(r_origin), rw.hi.min(r_hi), None);
        let omega = match omega_window {
            None => lattice(0.0, angle_step, 0.0, 2.0 * PI, Some(2.0 * PI)),
            Some(w) => {
                let full = lattice(0.0, angle_step, 0.0, 2.0 * PI, Some(2.0 * PI));
                let n = full.len() as i64;
                let k_lo = ((w.lo / angle_step) - 1e-9).ceil() as i64;
                let k_hi = ((w.hi / angle_step) + 1e-9).floor() as i64;
                (k_lo..=k_hi.min(k_lo + n - 1))
                    .map(|k| full[k.rem_euclid(n) as usize])
                    .collect()
            }
        };
        let pw = phi_window.unwrap_or(Window { lo: 0.0, hi: FRAC_PI_2 });
        let phi = lattice(0.0, angle_step, pw.lo.max(0.0), pw.hi.min(FRAC_PI_2), Some(FRAC_PI_2));
        let grid = Self {
            r,
            omega,
            phi,
            r_step,
            angle_step,
        };
        if grid.is_empty() {
            return Err(config("polar grid is empty"));
        }
        Ok(grid)
    }

    pub fn len(&self) -> usize {
        self.r.len() * self.omega.len() * self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Node at linear index `i` (range-major, then azimuth, then polar angle).
    pub fn node(&self, i: usize) -> PolarPoint {
        let np = self.phi.len();
        let no = self.omega.len();
        PolarPoint::new(self.r[i / (no * np)], self.omega[(i / np) % no], self.phi[i % np])
    }
}

/// `|a(p)ᴴ y|²` for a Cartesian point.
pub fn correlation_power(positions: &[Vec3], y: &[C64], k: f64, p: &Vec3) -> f64 {
    positions
        .iter()
        .zip(y)
        .map(|(b, v)| C64::from_polar(1.0, k * (p - b).norm()) * v)
        .sum::<C64>()
        .norm_sqr()
}

/// Grid node with the largest correlation magnitude; ties go to the lowest
/// linear index.
pub fn omp_estimate(snapshot: &Snapshot, geom: &ArrayGeometry, grid: &PolarGrid) -> Result<LocationEstimate> {
    snapshot.check_len(geom)?;
    let positions = geom.positions();
    let k = 2.0 * PI / geom.wavelength;
    let (best, _) = par::argmax_range(grid.len(), |i| {
        correlation_power(&positions, &snapshot.y, k, &grid.node(i).to_cartesian())
    })
    .ok_or_else(|| config("polar grid is empty"))?;
    let q = grid.node(best);
    let p_hat = q.to_cartesian();
    // Second moment of a uniform grid cell, mapped to Cartesian coordinates.
    let cell = Vec3::new(grid.r_step, grid.angle_step, grid.angle_step).map(|s| s * s / 12.0);
    let j = q.jacobian();
    let cov = j * Matrix3::from_diagonal(&cell) * j.transpose();
    let floor = cov.trace() * 1e-9 + 1e-15;
    let belief = GaussianBelief3::new(p_hat, cov + Matrix3::identity() * floor)?;
    Ok(LocationEstimate {
        p_hat,
        belief,
        posteriors: Vec::new(),
        trace: Vec::new(),
        flags: EstimateFlags::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{synthesize_noiseless, ComplexGain};
    use crate::eaple::ml_objective;
    use crate::geometry::UeLocation;

    fn geom() -> ArrayGeometry {
        ArrayGeometry::square(16, 0.0075, 0.03).unwrap()
    }

    #[test]
    fn windowed_grid_keeps_absolute_nodes() {
        let g = PolarGrid::windowed(0.5, 10.0, Some(Window { lo: 2.95, hi: 3.25 }), Some(Window { lo: -0.05, hi: 0.05 }), Some(Window { lo: 0.5, hi: 0.55 })).unwrap();
        assert_eq!(g.r.len(), 3);
        assert!((g.r[0] - 3.0).abs() < 1e-12);
        assert_eq!(g.omega.len(), 5);
        assert!(g.omega.iter().any(|w| (w - (2.0 * PI - 0.04)).abs() < 1e-9 || (w - 6.26).abs() < 1e-9));
        assert!(g.phi.iter().all(|p| (0.5..=0.55).contains(p)));
    }

    #[test]
    fn noiseless_node_is_recovered() {
        let grid = PolarGrid::windowed(0.5, 10.0, Some(Window { lo: 2.0, hi: 2.4 }), Some(Window { lo: 0.9, hi: 1.1 }), Some(Window { lo: 0.4, hi: 0.6 })).unwrap();
        let q = grid.node(grid.len() / 2 + 3);
        let snap = synthesize_noiseless(&geom(), &UeLocation::from_polar(q).unwrap(), ComplexGain::from_polar(1.0, 0.2), 1.0).unwrap();
        let est = omp_estimate(&snap, &geom(), &grid).unwrap();
        assert!((est.p_hat - q.to_cartesian()).norm() < 1e-12);
        assert!(est.belief.cov.cholesky().is_some());
    }

    #[test]
    fn correlation_matches_likelihood_up_to_energy() {
        let q0 = PolarPoint::new(2.0, 1.0, 0.5);
        let snap = synthesize_noiseless(&geom(), &UeLocation::from_polar(q0).unwrap(), ComplexGain::from_polar(2.0, 0.2), 0.5).unwrap();
        let energy: f64 = snap.y.iter().map(|v| v.norm_sqr()).sum();
        let positions = geom().positions();
        let n = positions.len() as f64;
        for q in [PolarPoint::new(2.1, 1.02, 0.48), PolarPoint::new(3.0, 0.2, 1.0)] {
            let c = correlation_power(&positions, &snap.y, 2.0 * PI / 0.03, &q.to_cartesian());
            let f = ml_objective(&snap, &geom(), &q).unwrap();
            assert!((f - (-(energy - c / n) / 0.5)).abs() < 1e-9 * energy);
        }
    }

    #[test]
    fn full_grid_has_expected_size() {
        let g = PolarGrid::full(1.0, 1.3).unwrap();
        assert_eq!(g.r.len(), 4);
        assert_eq!(g.omega.len(), (2.0 * PI / ANGLE_STEP).ceil() as usize);
        assert_eq!(g.phi.len(), (FRAC_PI_2 / ANGLE_STEP).ceil() as usize);
    }
}
