//! Fusion of subarray direction-cosine messages into a location belief.
//!
//! Messages are indexed by `j = 2m + u` with `u = 0` for the x axis and
//! `u = 1` for y. For a candidate UE position `p`, subarray `m` sees the
//! direction cosine `θ_{m,u}(p) = e_uᵀ(p − c_m) / ‖p − c_m‖`. The fusion
//! objective is
//!
//! `ϖ(p) = Σ_j κ_j cos(π θ_j(p) − μ_j)`
//!
//! optionally leaving one term out. Its local maximum and curvature give the
//! Gaussian location belief, which is projected back onto each direction
//! cosine as a refreshed Von Mises prior.

use std::f64::consts::PI;

use nalgebra::Matrix3;

use crate::error::{domain, Error, Result};
use crate::channel::C64;
use crate::geometry::{wrap_pi, Vec3};
use crate::vonmises::{GaussianBelief3, VonMisesMessage};

/// Backtracking line-search constants shared by the ascent routines.
pub const ARMIJO: f64 = 1e-4;
pub const SHRINK: f64 = 0.5;
const MAX_HALVINGS: usize = 80;

pub fn axis(u: usize) -> Vec3 {
    if u == 0 {
        Vec3::x()
    } else {
        Vec3::y()
    }
}

/// Direction cosine of `p − center` along axis `u`, with its gradient and
/// Hessian in `p`.
pub fn direction_cosine(p: &Vec3, center: &Vec3, u: usize) -> Result<(f64, Vec3, Matrix3<f64>)> {
    let d = p - center;
    let rho = d.norm();
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(domain(format!("point {p:?} coincides with subarray center {center:?}")));
    }
    let e = d / rho;
    let eu = axis(u);
    let theta = e[u];
    let grad = (eu - e * theta) / rho;
    let hess = (e * e.transpose() * (3.0 * theta)
        - Matrix3::identity() * theta
        - e * eu.transpose()
        - eu * e.transpose())
        / (rho * rho);
    Ok((theta, grad, hess))
}

/// The fusion objective over a fixed message set.
#[derive(Debug, Clone, Copy)]
pub struct Varpi<'a> {
    pub centers: &'a [Vec3],
    pub msgs: &'a [VonMisesMessage],
    /// Message index left out of the sum.
    pub exclude: Option<usize>,
}

impl<'a> Varpi<'a> {
    pub fn new(centers: &'a [Vec3], msgs: &'a [VonMisesMessage], exclude: Option<usize>) -> Result<Self> {
        if msgs.len() != 2 * centers.len() {
            return Err(domain(format!(
                "{} messages for {} subarrays; expected two per subarray",
                msgs.len(),
                centers.len()
            )));
        }
        Ok(Self { centers, msgs, exclude })
    }

    fn terms(&self) -> impl Iterator<Item = (usize, &VonMisesMessage)> + '_ {
        self.msgs
            .iter()
            .enumerate()
            .filter(move |(j, m)| Some(*j) != self.exclude && m.kappa > 0.0)
    }

    /// Sum of the concentrations that enter the objective.
    pub fn total_kappa(&self) -> f64 {
        self.terms().map(|(_, m)| m.kappa).sum()
    }

    pub fn value(&self, p: &Vec3) -> Result<f64> {
        let mut f = 0.0;
        for (j, msg) in self.terms() {
            let (theta, _, _) = direction_cosine(p, &self.centers[j / 2], j % 2)?;
            f += msg.kappa * (PI * theta - msg.mu).cos();
        }
        finite(f, p)
    }

    pub fn gradient(&self, p: &Vec3) -> Result<Vec3> {
        Ok(self.evaluate(p)?.1)
    }

    pub fn hessian(&self, p: &Vec3) -> Result<Matrix3<f64>> {
        Ok(self.evaluate(p)?.2)
    }

    /// Value, gradient and Hessian in one pass.
    pub fn evaluate(&self, p: &Vec3) -> Result<(f64, Vec3, Matrix3<f64>)> {
        let mut f = 0.0;
        let mut g = Vec3::zeros();
        let mut h = Matrix3::zeros();
        for (j, msg) in self.terms() {
            let (theta, dt, ht) = direction_cosine(p, &self.centers[j / 2], j % 2)?;
            let (s, c) = (PI * theta - msg.mu).sin_cos();
            f += msg.kappa * c;
            g -= dt * (PI * msg.kappa * s);
            h -= dt * dt.transpose() * (PI * PI * msg.kappa * c) + ht * (PI * msg.kappa * s);
        }
        finite(f, p)?;
        Ok((f, g, (h + h.transpose()) * 0.5))
    }
}

fn finite(f: f64, p: &Vec3) -> Result<f64> {
    if f.is_finite() {
        Ok(f)
    } else {
        Err(Error::Numerical(format!("fusion objective is not finite at {p:?}")))
    }
}

pub fn varpi(p: &Vec3, centers: &[Vec3], msgs: &[VonMisesMessage], exclude: Option<usize>) -> Result<f64> {
    Varpi::new(centers, msgs, exclude)?.value(p)
}

pub fn varpi_gradient(p: &Vec3, centers: &[Vec3], msgs: &[VonMisesMessage], exclude: Option<usize>) -> Result<Vec3> {
    Varpi::new(centers, msgs, exclude)?.gradient(p)
}

pub fn varpi_hessian(
    p: &Vec3,
    centers: &[Vec3],
    msgs: &[VonMisesMessage],
    exclude: Option<usize>,
) -> Result<Matrix3<f64>> {
    Varpi::new(centers, msgs, exclude)?.hessian(p)
}

/// Result of a local maximization of the fusion objective.
#[derive(Debug, Clone)]
pub struct Maximum {
    pub point: Vec3,
    pub value: f64,
    pub hessian: Matrix3<f64>,
    pub gradient_norm: f64,
    pub iterations: usize,
    /// Objective value after every accepted step, starting at the initial point.
    pub trace: Vec<f64>,
}

/// Stopping rule for [`maximize_varpi`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AscentOptions {
    pub max_iter: usize,
    /// Gradient-norm tolerance per unit of total concentration.
    pub grad_tol: f64,
}

impl Default for AscentOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            grad_tol: 1e-8,
        }
    }
}

/// Local ascent from `init`: Newton direction where the objective is locally
/// concave, gradient direction otherwise, with Armijo backtracking so every
/// accepted iterate increases the objective.
pub fn maximize_varpi(init: &Vec3, obj: &Varpi<'_>, opts: AscentOptions) -> Result<Maximum> {
    let mut p = *init;
    let (mut f, mut g, mut h) = obj.evaluate(&p)?;
    let mut trace = vec![f];
    let mut iterations = 0;
    let tol = opts.grad_tol * obj.total_kappa().max(1.0);
    while iterations < opts.max_iter && g.norm() >= tol {
        let dir = match (-h).cholesky() {
            Some(ch) => ch.solve(&g),
            None => g,
        };
        let slope = g.dot(&dir);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let cand = p + dir * t;
            if cand != p {
                match obj.evaluate(&cand) {
                    Ok(next) if next.0 >= f + ARMIJO * t * slope => {
                        accepted = Some((cand, next));
                        break;
                    }
                    Err(e @ Error::Numerical(_)) => return Err(e),
                    _ => {}
                }
            }
            t *= SHRINK;
        }
        let Some((cand, next)) = accepted else { break };
        if next.0 < f {
            break;
        }
        p = cand;
        (f, g, h) = next;
        trace.push(f);
        iterations += 1;
    }
    Ok(Maximum {
        point: p,
        value: f,
        hessian: h,
        gradient_norm: g.norm(),
        iterations,
        trace,
    })
}

/// Laplace belief `N(p̂, (−H)⁻¹)`. The flag is set when `−H` had to be
/// regularized.
pub fn gaussian_belief(p_hat: &Vec3, hessian: &Matrix3<f64>) -> Result<(GaussianBelief3, bool)> {
    let neg = -(hessian + hessian.transpose()) * 0.5;
    if let Some(ch) = neg.cholesky() {
        let cov = ch.inverse();
        if let Ok(b) = GaussianBelief3::new(*p_hat, (cov + cov.transpose()) * 0.5) {
            return Ok((b, false));
        }
    }
    let eps = 1e-9 * neg.trace().abs() / 3.0 + 1e-12;
    let shifted = neg + Matrix3::identity() * eps;
    let cov = match shifted.cholesky() {
        Some(ch) => ch.inverse(),
        None => {
            // Indefinite: floor the spectrum.
            let eig = neg.symmetric_eigen();
            let floor = eig.eigenvalues.amax() * 1e-9 + 1e-12;
            let inv = eig.eigenvalues.map(|l| 1.0 / l.max(floor));
            eig.eigenvectors * Matrix3::from_diagonal(&inv) * eig.eigenvectors.transpose()
        }
    };
    Ok((GaussianBelief3::new(*p_hat, (cov + cov.transpose()) * 0.5)?, true))
}

/// Projection of a location belief onto the direction cosine of subarray
/// `center` along axis `u`. Returns the uniform message and `true` when the
/// geometry is degenerate.
pub fn projection_message(belief: &GaussianBelief3, center: &Vec3, u: usize) -> (VonMisesMessage, bool) {
    let ubar = belief.mean - center;
    let n2 = ubar.norm_squared();
    if !(n2 > 0.0) {
        return (VonMisesMessage::uniform(), true);
    }
    let theta = ubar[u] / n2.sqrt();
    if theta.abs() >= 1.0 - 1e-9 {
        return (VonMisesMessage::uniform(), true);
    }
    let Some(v) = projection_direction(&ubar, u) else {
        return (VonMisesMessage::uniform(), true);
    };
    let q = (v.transpose() * belief.cov * v)[(0, 0)];
    let kappa = n2 / (PI * PI * (1.0 - theta * theta) * q);
    if !(kappa.is_finite() && kappa >= 0.0) {
        return (VonMisesMessage::uniform(), true);
    }
    (VonMisesMessage::at_theta(theta, kappa), false)
}

/// Unit vector `((ū × e_u) × ū) / ‖·‖`, the direction in which the direction
/// cosine changes fastest.
pub fn projection_direction(ubar: &Vec3, u: usize) -> Option<Vec3> {
    let w = ubar.cross(&axis(u)).cross(ubar);
    let n = w.norm();
    if n <= 1e-12 * ubar.norm_squared() || !n.is_finite() {
        None
    } else {
        Some(w / n)
    }
}

/// Closed-form weighted least-squares triangulation of the UE from direction
/// cosine messages.
///
/// Each message gives `(p − c_m)_u ≈ θ̂ ρ_m`. Writing `ρ_m ≈ r + δ_m`, with
/// `δ_m` taken from the current linearization point, the constraints are
/// linear in `(x, y, r)`. The solve is repeated a few times with `δ_m`
/// refreshed. Near grazing incidence noise can push `x² + y²` past `r²`; the
/// height is then floored at `10⁻³ r`. Returns `None` when the system is
/// singular or the range comes out non-positive.
pub fn triangulate(centers: &[Vec3], msgs: &[VonMisesMessage], nominal_range: f64) -> Option<Vec3> {
    let mut p0 = nominal_point(msgs, nominal_range)?;
    let thetas = unwrapped_thetas(msgs);
    let kmax = msgs.iter().map(|m| m.kappa).fold(0.0, f64::max);
    if kmax <= 0.0 {
        return None;
    }
    for _ in 0..4 {
        let r0 = p0.norm();
        let mut ata = Matrix3::zeros();
        let mut atb = Vec3::zeros();
        for (j, msg) in msgs.iter().enumerate() {
            if msg.kappa <= 0.0 {
                continue;
            }
            let (m, u) = (j / 2, j % 2);
            let c = centers[m];
            let theta = thetas[j];
            let delta = (p0 - c).norm() - r0;
            let mut row = Vec3::zeros();
            row[u] = 1.0;
            row[2] = -theta;
            let rhs = c[u] + theta * delta;
            let w = msg.kappa / kmax;
            ata += row * row.transpose() * w;
            atb += row * (rhs * w);
        }
        let sol = ata.cholesky()?.solve(&atb);
        let (x, y, r) = (sol[0], sol[1], sol[2]);
        if !(r > 0.0 && sol.iter().all(|v| v.is_finite())) {
            return None;
        }
        let z2 = (r * r - x * x - y * y).max(1e-6 * r * r);
        let eig = ata.symmetric_eigen().eigenvalues;
        if eig.min() <= 1e-12 * eig.max() {
            return None;
        }
        p0 = Vec3::new(x, y, z2.sqrt());
    }
    Some(p0)
}

/// Message modes as direction cosines, each unwrapped to within `π` of the
/// circular mean of its axis before clipping to `[-1, 1]`. At half-wavelength
/// spacing a cosine just below 1 and one just above −1 are neighbours on the
/// circle; unwrapping keeps them together for linear solvers.
pub fn unwrapped_thetas(msgs: &[VonMisesMessage]) -> Vec<f64> {
    let mut mean = [C64::new(0.0, 0.0); 2];
    for (j, msg) in msgs.iter().enumerate() {
        mean[j % 2] += msg.natural();
    }
    msgs.iter()
        .enumerate()
        .map(|(j, msg)| {
            let centre = mean[j % 2].arg();
            ((centre + wrap_pi(msg.mu - centre)) / PI).clamp(-1.0, 1.0)
        })
        .collect()
}

/// Point at `range` from the origin along the κ-weighted mean direction of
/// the messages.
pub fn nominal_point(msgs: &[VonMisesMessage], range: f64) -> Option<Vec3> {
    let mut acc = [0.0f64; 2];
    let mut wsum = [0.0f64; 2];
    for ((j, msg), theta) in msgs.iter().enumerate().zip(unwrapped_thetas(msgs)) {
        acc[j % 2] += msg.kappa * theta;
        wsum[j % 2] += msg.kappa;
    }
    let tx = if wsum[0] > 0.0 { acc[0] / wsum[0] } else { 0.0 };
    let ty = if wsum[1] > 0.0 { acc[1] / wsum[1] } else { 0.0 };
    let mut dir = Vec3::new(tx, ty, 0.0);
    let n2 = dir.norm_squared();
    if n2 >= 1.0 {
        dir *= (1.0 - 1e-6) / n2.sqrt();
    }
    dir.z = (1.0 - dir.norm_squared()).sqrt();
    let p = dir * range;
    p.iter().all(|v| v.is_finite()).then_some(p)
}
