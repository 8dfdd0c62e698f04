//! Maximum-likelihood refinement over the exact spherical-wave model.
//!
//! With the gain concentrated out, the log-likelihood of a UE position is
//!
//! `F = −(‖y‖² − |a(p)ᴴ y|² / N_B) / σ²`.
//!
//! It is maximized by block coordinate ascent in polar coordinates: the angle
//! pair `(ω, φ)` with the range fixed, then the range with the angles fixed.

use std::f64::consts::FRAC_PI_2;
use std::f64::consts::PI;

use nalgebra::{Matrix2, Matrix3, Vector2};
use serde::{Deserialize, Serialize};

use crate::channel::{ComplexGain, Snapshot, C64};
use crate::error::{config, Error, Result};
use crate::fusion::{ARMIJO, SHRINK};
use crate::geometry::{wrap_two_pi, ArrayGeometry, Vec3};

pub use crate::geometry::PolarPoint;

const PHI_MARGIN: f64 = 1e-6;
const MAX_HALVINGS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EapleConfig {
    /// Outer block iterations.
    pub t3: usize,
    /// Ascent steps on the angle block per outer iteration.
    pub t_theta: usize,
    /// Ascent steps on the range block per outer iteration.
    pub t_r: usize,
    /// Initial gradient step on the angles (rad).
    pub angle_step: f64,
    /// Initial gradient step on the range, as a fraction of the range.
    pub range_step: f64,
    /// Stop when one outer iteration improves `F` by less than this times
    /// `max(|F|, 1)`.
    pub rel_tol: f64,
}

impl Default for EapleConfig {
    fn default() -> Self {
        Self {
            t3: 30,
            t_theta: 10,
            t_r: 10,
            angle_step: 1.0,
            range_step: 0.1,
            rel_tol: 1e-9,
        }
    }
}

impl EapleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t3 == 0 || self.t_theta == 0 || self.t_r == 0 {
            return Err(config("iteration counts must be positive"));
        }
        for (name, v) in [
            ("angle_step", self.angle_step),
            ("range_step", self.range_step),
            ("rel_tol", self.rel_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which block of polar coordinates a gradient refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Angle,
    Range,
}

/// The concentrated log-likelihood for one snapshot.
#[derive(Debug, Clone)]
pub struct MlObjective<'a> {
    y: &'a [C64],
    positions: Vec<Vec3>,
    noise_variance: f64,
    energy: f64,
    k: f64,
}

/// `a(p)ᴴ y` with its Cartesian gradient and Hessian.
struct Corr {
    s: C64,
    ds: [C64; 3],
    dds: [[C64; 3]; 3],
}

impl<'a> MlObjective<'a> {
    pub fn new(snapshot: &'a Snapshot, geom: &ArrayGeometry) -> Result<Self> {
        snapshot.check_len(geom)?;
        Ok(Self {
            y: &snapshot.y,
            positions: geom.positions(),
            noise_variance: snapshot.noise_variance,
            energy: snapshot.y.iter().map(|v| v.norm_sqr()).sum(),
            k: 2.0 * PI / geom.wavelength,
        })
    }

    fn n(&self) -> f64 {
        self.positions.len() as f64
    }

    fn correlation(&self, p: &Vec3) -> C64 {
        self.positions
            .iter()
            .zip(self.y)
            .map(|(b, y)| C64::from_polar(1.0, self.k * (p - b).norm()) * y)
            .sum()
    }

    fn correlation_derivatives(&self, p: &Vec3, second: bool) -> Corr {
        let zero = C64::new(0.0, 0.0);
        let mut out = Corr {
            s: zero,
            ds: [zero; 3],
            dds: [[zero; 3]; 3],
        };
        let k = self.k;
        for (b, y) in self.positions.iter().zip(self.y) {
            let d = p - b;
            let r = d.norm();
            let u = d / r;
            let w = C64::from_polar(1.0, k * r) * y;
            out.s += w;
            let jkw = C64::new(-w.im * k, w.re * k);
            for a in 0..3 {
                out.ds[a] += jkw * u[a];
            }
            if second {
                // w [−k² u uᵀ + j k (I − u uᵀ) / r]
                let wk2 = w * (k * k);
                let jkw_r = jkw / r;
                for a in 0..3 {
                    for c in a..3 {
                        let uu = u[a] * u[c];
                        let id = if a == c { 1.0 } else { 0.0 };
                        out.dds[a][c] += jkw_r * (id - uu) - wk2 * uu;
                    }
                }
            }
        }
        for a in 0..3 {
            for c in 0..a {
                out.dds[a][c] = out.dds[c][a];
            }
        }
        out
    }

    fn objective_from_power(&self, power: f64) -> f64 {
        -(self.energy - power / self.n()) / self.noise_variance
    }

    /// `F` at a Cartesian point.
    pub fn value_at(&self, p: &Vec3) -> f64 {
        self.objective_from_power(self.correlation(p).norm_sqr())
    }

    /// `F` with Cartesian gradient and Hessian.
    pub fn derivatives_at(&self, p: &Vec3) -> (f64, Vec3, Matrix3<f64>) {
        let c = self.correlation_derivatives(p, true);
        let scale = 1.0 / (self.n() * self.noise_variance);
        let mut g = Vec3::zeros();
        let mut h = Matrix3::zeros();
        for a in 0..3 {
            g[a] = 2.0 * (c.s.conj() * c.ds[a]).re * scale;
            for b in 0..3 {
                h[(a, b)] = 2.0 * ((c.ds[a].conj() * c.ds[b]).re + (c.s.conj() * c.dds[a][b]).re) * scale;
            }
        }
        (self.objective_from_power(c.s.norm_sqr()), g, (h + h.transpose()) * 0.5)
    }

    /// `F` with Cartesian gradient only.
    pub fn gradient_at(&self, p: &Vec3) -> (f64, Vec3) {
        let c = self.correlation_derivatives(p, false);
        let scale = 1.0 / (self.n() * self.noise_variance);
        let g = Vec3::from_fn(|a, _| 2.0 * (c.s.conj() * c.ds[a]).re * scale);
        (self.objective_from_power(c.s.norm_sqr()), g)
    }

    pub fn value(&self, q: &PolarPoint) -> f64 {
        self.value_at(&q.to_cartesian())
    }

    /// `F`, gradient and Hessian in `(r, ω, φ)`.
    pub fn polar_derivatives(&self, q: &PolarPoint) -> (f64, Vec3, Matrix3<f64>) {
        let (f, g, h) = self.derivatives_at(&q.to_cartesian());
        let j = q.jacobian();
        let gq = j.transpose() * g;
        let mut hq = j.transpose() * h * j;
        let second = polar_second_derivatives(q);
        for (i, hp) in second.iter().enumerate() {
            hq += hp * g[i];
        }
        (f, gq, (hq + hq.transpose()) * 0.5)
    }

    /// Polar gradient only.
    pub fn polar_gradient(&self, q: &PolarPoint) -> (f64, Vec3) {
        let (f, g) = self.gradient_at(&q.to_cartesian());
        (f, q.jacobian().transpose() * g)
    }

    /// Least-squares gain `a(p)ᴴ y / N_B`.
    pub fn gain_at(&self, p: &Vec3) -> ComplexGain {
        ComplexGain(self.correlation(p) / self.n())
    }
}

/// Hessians of the Cartesian components `x, y, z` with respect to `(r, ω, φ)`.
pub fn polar_second_derivatives(q: &PolarPoint) -> [Matrix3<f64>; 3] {
    let (so, co) = q.omega.sin_cos();
    let (sp, cp) = q.phi.sin_cos();
    let r = q.r;
    let x = Matrix3::new(
        0.0, -so * sp, co * cp,
        -so * sp, -r * co * sp, -r * so * cp,
        co * cp, -r * so * cp, -r * co * sp,
    );
    let y = Matrix3::new(
        0.0, co * sp, so * cp,
        co * sp, -r * so * sp, r * co * cp,
        so * cp, r * co * cp, -r * so * sp,
    );
    let z = Matrix3::new(
        0.0, 0.0, -sp,
        0.0, 0.0, 0.0,
        -sp, 0.0, -r * cp,
    );
    [x, y, z]
}

/// Concentrated log-likelihood at `q`.
pub fn ml_objective(snapshot: &Snapshot, geom: &ArrayGeometry, q: &PolarPoint) -> Result<f64> {
    Ok(MlObjective::new(snapshot, geom)?.value(q))
}

/// Least-squares gain `α̂ = a(q)ᴴ y / ‖a‖²`.
pub fn ls_gain(snapshot: &Snapshot, geom: &ArrayGeometry, q: &PolarPoint) -> Result<ComplexGain> {
    Ok(MlObjective::new(snapshot, geom)?.gain_at(&q.to_cartesian()))
}

/// Gradient of `F` on one block: `[∂F/∂ω, ∂F/∂φ]` or `[∂F/∂r]`.
pub fn gradient_f(snapshot: &Snapshot, geom: &ArrayGeometry, q: &PolarPoint, block: Block) -> Result<Vec<f64>> {
    let (_, g) = MlObjective::new(snapshot, geom)?.polar_gradient(q);
    Ok(match block {
        Block::Angle => vec![g[1], g[2]],
        Block::Range => vec![g[0]],
    })
}

/// Output of [`bca_refine`].
#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub point: PolarPoint,
    pub value: f64,
    /// `(F, point)` after each outer iteration, starting with the initial point.
    pub trace: Vec<(f64, PolarPoint)>,
    pub outer_iterations: usize,
    pub converged: bool,
}

fn project(q: PolarPoint, min_r: f64) -> PolarPoint {
    PolarPoint {
        r: q.r.max(min_r),
        omega: wrap_two_pi(q.omega),
        phi: q.phi.clamp(PHI_MARGIN, FRAC_PI_2 - PHI_MARGIN),
    }
}

fn check_finite(g: &Vec3, q: &PolarPoint) -> Result<()> {
    if g.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite likelihood gradient at {q:?}")))
    }
}

/// Backtracking from `q` along `dir` (a displacement in `(r, ω, φ)`).
/// Accepts the first candidate whose gain beats the Armijo bound computed
/// from the displacement that survived projection.
fn line_search(
    obj: &MlObjective<'_>,
    q: &PolarPoint,
    f: f64,
    grad: &Vec3,
    dir: &Vec3,
    min_r: f64,
) -> Option<(PolarPoint, f64)> {
    let mut t = 1.0;
    for _ in 0..MAX_HALVINGS {
        let raw = PolarPoint::new(q.r + t * dir[0], q.omega + t * dir[1], q.phi + t * dir[2]);
        let cand = project(raw, min_r);
        let moved = Vec3::new(cand.r - q.r, raw.omega - q.omega, cand.phi - q.phi);
        let slope = grad.dot(&moved);
        if moved.norm() == 0.0 {
            return None;
        }
        if slope > 0.0 {
            let fc = obj.value(&cand);
            if fc > f && fc >= f + ARMIJO * slope {
                return Some((cand, fc));
            }
        }
        t *= SHRINK;
    }
    None
}

/// Block coordinate ascent from `init`.
pub fn bca_refine(snapshot: &Snapshot, geom: &ArrayGeometry, init: &PolarPoint, cfg: &EapleConfig) -> Result<Refinement> {
    cfg.validate()?;
    let obj = MlObjective::new(snapshot, geom)?;
    let min_r = 1e-3 * geom.wavelength;
    let mut q = project(*init, min_r);
    let mut f = obj.value(&q);
    let mut trace = vec![(f, q)];
    let mut converged = false;
    let mut outer = 0;
    while outer < cfg.t3 {
        let f_start = f;
        for _ in 0..cfg.t_theta {
            let (_, g, h) = obj.polar_derivatives(&q);
            check_finite(&g, &q)?;
            let ga = Vector2::new(g[1], g[2]);
            if ga.norm() == 0.0 {
                break;
            }
            let ha = Matrix2::new(h[(1, 1)], h[(1, 2)], h[(2, 1)], h[(2, 2)]);
            let step = match (-ha).cholesky() {
                Some(ch) => ch.solve(&ga),
                None => ga * (cfg.angle_step / ga.norm()),
            };
            let dir = Vec3::new(0.0, step.x, step.y);
            match line_search(&obj, &q, f, &g, &dir, min_r) {
                Some((nq, nf)) => (q, f) = (nq, nf),
                None => break,
            }
        }
        for _ in 0..cfg.t_r {
            let (_, g, h) = obj.polar_derivatives(&q);
            check_finite(&g, &q)?;
            if g[0] == 0.0 {
                break;
            }
            let step = if h[(0, 0)] < 0.0 {
                -g[0] / h[(0, 0)]
            } else {
                g[0].signum() * cfg.range_step * q.r
            };
            let dir = Vec3::new(step, 0.0, 0.0);
            match line_search(&obj, &q, f, &g, &dir, min_r) {
                Some((nq, nf)) => (q, f) = (nq, nf),
                None => break,
            }
        }
        outer += 1;
        trace.push((f, q));
        if f - f_start < cfg.rel_tol * f.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    Ok(Refinement {
        point: q,
        value: f,
        trace,
        outer_iterations: outer,
        converged,
    })
}
