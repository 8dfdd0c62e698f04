//! Cramér-Rao bound of the exact model and the misspecified bound of the
//! subarray plane-wave model.
//!
//! Exact model parameters are `η = [p, ∠α, |α|]`. The plane-wave model gives
//! every subarray its own gain, `γ = [p, ∠α_1, |α_1|, …, ∠α_M, |α_M|]`, and
//! generates subarray `m` as `α_m a_F(θ_m(p))`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix5};
use serde::{Deserialize, Serialize};

use crate::aoa::{correlation, SubarrayShape};
use crate::channel::{farfield_steering, subarray_view, synthesize_noiseless, ComplexGain, C64};
use crate::error::{domain, Error, Result};
use crate::fusion::{direction_cosine, ARMIJO, SHRINK};
use crate::geometry::{wrap_pi, ArrayGeometry, PartitionPlan, UeLocation, Vec3};

/// Exact-model parameter `[p, ∠α, |α|]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueParam {
    pub p: Vec3,
    pub angle_alpha: f64,
    pub mag_alpha: f64,
}

impl TrueParam {
    pub fn new(p: Vec3, gain: ComplexGain) -> Result<Self> {
        if !(gain.magnitude() > 0.0) {
            return Err(domain("gain magnitude must be positive"));
        }
        Ok(Self {
            p,
            angle_alpha: gain.phase(),
            mag_alpha: gain.magnitude(),
        })
    }

    pub fn gain(&self) -> ComplexGain {
        ComplexGain::from_polar(self.mag_alpha, self.angle_alpha)
    }

    /// The plane-wave model parameter that corresponds to this truth:
    /// `∠α_m = ∠α − 2π r_m / λ`, `|α_m| = |α|`.
    pub fn nominal_mis_param(&self, plan: &PartitionPlan) -> MisParam {
        let lambda = plan.geometry.wavelength;
        MisParam {
            p: self.p,
            gains: plan
                .centers()
                .iter()
                .map(|c| (wrap_pi(self.angle_alpha - 2.0 * PI * (self.p - c).norm() / lambda), self.mag_alpha))
                .collect(),
        }
    }
}

/// Plane-wave model parameter `γ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisParam {
    pub p: Vec3,
    /// `(∠α_m, |α_m|)` per subarray.
    pub gains: Vec<(f64, f64)>,
}

impl MisParam {
    pub fn len(&self) -> usize {
        3 + 2 * self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.len());
        v.fixed_rows_mut::<3>(0).copy_from(&self.p);
        for (m, (a, g)) in self.gains.iter().enumerate() {
            v[3 + 2 * m] = *a;
            v[4 + 2 * m] = *g;
        }
        v
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        let m = (v.len() - 3) / 2;
        Self {
            p: Vec3::new(v[0], v[1], v[2]),
            gains: (0..m).map(|i| (v[3 + 2 * i], v[4 + 2 * i])).collect(),
        }
    }

    fn gain(&self, m: usize) -> C64 {
        let (a, g) = self.gains[m];
        C64::from_polar(g, a)
    }
}

/// Derivative columns `∂μ/∂η` of `μ = α a(p)`, one row per antenna.
pub fn fim_jacobian(geom: &ArrayGeometry, truth: &TrueParam) -> Result<Vec<[C64; 5]>> {
    let k = 2.0 * PI / geom.wavelength;
    let alpha = truth.gain().0;
    let unit = C64::from_polar(1.0, truth.angle_alpha);
    geom.positions()
        .iter()
        .map(|b| {
            let d = truth.p - b;
            let r = d.norm();
            if r <= f64::EPSILON * (1.0 + truth.p.norm()) {
                return Err(domain("UE coincides with an antenna"));
            }
            let a = C64::from_polar(1.0, -k * r);
            let mu = alpha * a;
            let dr = mu * C64::new(0.0, -k) / r;
            Ok([dr * d.x, dr * d.y, dr * d.z, mu * C64::new(0.0, 1.0), unit * a])
        })
        .collect()
}

/// Fisher information `J = (2/σ²) Re[(∂μ/∂η)ᴴ (∂μ/∂η)]`.
pub fn fim(geom: &ArrayGeometry, truth: &TrueParam, noise_variance: f64) -> Result<Matrix5<f64>> {
    if !(noise_variance > 0.0) {
        return Err(domain("noise variance must be positive"));
    }
    let mut j = Matrix5::zeros();
    for row in fim_jacobian(geom, truth)? {
        for a in 0..5 {
            for b in a..5 {
                j[(a, b)] += (row[a].conj() * row[b]).re;
            }
        }
    }
    for a in 0..5 {
        for b in 0..a {
            j[(a, b)] = j[(b, a)];
        }
    }
    Ok(j * (2.0 / noise_variance))
}

/// `sqrt(tr([J⁻¹]_{pos}))`.
pub fn crb_position(fim: &Matrix5<f64>) -> Result<f64> {
    // Position and gain entries differ by many orders of magnitude, so the
    // conditioning test runs on the unit-diagonal rescaling.
    let s = fim.diagonal().map(|d| if d > 0.0 { d.sqrt().recip() } else { 1.0 });
    let scaled = Matrix5::from_diagonal(&s) * fim * Matrix5::from_diagonal(&s);
    let eig = scaled.symmetric_eigen().eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    let inv = scaled
        .try_inverse()
        .filter(|_| lo > 1e-14 * hi)
        .map(|i| Matrix5::from_diagonal(&s) * i * Matrix5::from_diagonal(&s));
    let Some(inv) = inv else {
        return Err(Error::Numerical(format!(
            "Fisher information is singular (condition number {:.3e})",
            hi / lo.abs().max(f64::MIN_POSITIVE)
        )));
    };
    let tr = inv.fixed_view::<3, 3>(0, 0).trace();
    if tr < 0.0 {
        return Err(Error::Numerical("negative position bound".into()));
    }
    Ok(tr.sqrt())
}

/// The plane-wave model over a fixed target mean.
#[derive(Debug, Clone)]
pub struct MisModel<'a> {
    plan: &'a PartitionPlan,
    shape: SubarrayShape,
    /// Target mean per subarray, in local order.
    target: Vec<Vec<C64>>,
}

impl<'a> MisModel<'a> {
    /// Target is the exact spherical-wave mean of `truth`.
    pub fn exact(plan: &'a PartitionPlan, truth: &TrueParam) -> Result<Self> {
        let loc = UeLocation::new(truth.p)?;
        let snap = synthesize_noiseless(&plan.geometry, &loc, truth.gain(), 1.0)?;
        let target = (0..plan.n_subarrays())
            .map(|m| subarray_view(&snap, plan, m))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::with_target(plan, target))
    }

    /// Arbitrary target mean, one vector per subarray in local order.
    pub fn with_target(plan: &'a PartitionPlan, target: Vec<Vec<C64>>) -> Self {
        Self {
            plan,
            shape: SubarrayShape::of_plan(plan),
            target,
        }
    }

    fn thetas(&self, p: &Vec3, m: usize) -> Result<[(f64, Vec3, Matrix3<f64>); 2]> {
        let c = self.plan.center(m);
        Ok([direction_cosine(p, &c, 0)?, direction_cosine(p, &c, 1)?])
    }

    fn steering(&self, theta_x: f64, theta_y: f64) -> Result<Vec<C64>> {
        let s = &self.shape;
        farfield_steering(s.n_x, s.n_y, s.d_x, s.d_y, s.wavelength, theta_x, theta_y)
    }

    /// `μ_F(γ)` per subarray.
    pub fn mean(&self, gamma: &MisParam) -> Result<Vec<Vec<C64>>> {
        (0..self.plan.n_subarrays())
            .map(|m| {
                let [(tx, _, _), (ty, _, _)] = self.thetas(&gamma.p, m)?;
                let a = self.steering(tx, ty)?;
                let g = gamma.gain(m);
                Ok(a.into_iter().map(|v| v * g).collect())
            })
            .collect()
    }

    /// Residual `ε(γ) = μ_target − μ_F(γ)` per subarray.
    pub fn residual(&self, gamma: &MisParam) -> Result<Vec<Vec<C64>>> {
        let mean = self.mean(gamma)?;
        Ok(self
            .target
            .iter()
            .zip(mean)
            .map(|(t, f)| t.iter().zip(f).map(|(a, b)| a - b).collect())
            .collect())
    }

    pub fn residual_norm_sqr(&self, gamma: &MisParam) -> Result<f64> {
        Ok(self
            .residual(gamma)?
            .iter()
            .flatten()
            .map(|v| v.norm_sqr())
            .sum())
    }

    /// Local derivative columns of subarray `m`: three position columns
    /// followed by `∂/∂∠α_m` and `∂/∂|α_m|`.
    pub fn local_jacobian(&self, gamma: &MisParam, m: usize) -> Result<Vec<[C64; 5]>> {
        let [(tx, gx, _), (ty, gy, _)] = self.thetas(&gamma.p, m)?;
        let a = self.steering(tx, ty)?;
        let (angle, _) = gamma.gains[m];
        let g = gamma.gain(m);
        let unit = C64::from_polar(1.0, angle);
        let (cx, cy) = (self.shape.slope_x(), self.shape.slope_y());
        let kc = (self.shape.n_x as f64 - 1.0) / 2.0;
        let lc = (self.shape.n_y as f64 - 1.0) / 2.0;
        let mut out = Vec::with_capacity(a.len());
        for (t, av) in a.iter().enumerate() {
            let (k, l) = (t / self.shape.n_y, t % self.shape.n_y);
            let mu = g * av;
            let dir = gx * (cx * (k as f64 - kc)) + gy * (cy * (l as f64 - lc));
            let jm = mu * C64::new(0.0, 1.0);
            out.push([jm * dir.x, jm * dir.y, jm * dir.z, jm, unit * av]);
        }
        Ok(out)
    }

    /// Full derivative matrix `∂μ_F/∂γ` in concatenated subarray order.
    pub fn jacobian(&self, gamma: &MisParam) -> Result<DMatrix<C64>> {
        let n_m = self.shape.len();
        let m_count = self.plan.n_subarrays();
        let mut d = DMatrix::zeros(n_m * m_count, 3 + 2 * m_count);
        for m in 0..m_count {
            for (t, row) in self.local_jacobian(gamma, m)?.iter().enumerate() {
                let i = m * n_m + t;
                for a in 0..3 {
                    d[(i, a)] = row[a];
                }
                d[(i, 3 + 2 * m)] = row[3];
                d[(i, 4 + 2 * m)] = row[4];
            }
        }
        Ok(d)
    }

    /// `Re[εᴴ ∂μ_F/∂γ]` for a fixed residual and the Gram matrix
    /// `Re[(∂μ_F/∂γ)ᴴ ∂μ_F/∂γ]`.
    fn projections(&self, gamma: &MisParam, eps: &[Vec<C64>], gram: bool) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let m_count = self.plan.n_subarrays();
        let n = 3 + 2 * m_count;
        let mut v = DVector::zeros(n);
        let mut g = DMatrix::zeros(if gram { n } else { 0 }, if gram { n } else { 0 });
        for m in 0..m_count {
            let idx = [0, 1, 2, 3 + 2 * m, 4 + 2 * m];
            for (row, e) in self.local_jacobian(gamma, m)?.iter().zip(&eps[m]) {
                for a in 0..5 {
                    v[idx[a]] += (e.conj() * row[a]).re;
                    if gram {
                        for b in 0..5 {
                            g[(idx[a], idx[b])] += (row[a].conj() * row[b]).re;
                        }
                    }
                }
            }
        }
        Ok((v, g))
    }

    /// Profile objective `Σ_m |a_F(θ_m(p))ᴴ t_m|² / N_m` with its gradient
    /// and Hessian in `p`. Maximizing it minimizes the residual over the gains.
    fn profile(&self, p: &Vec3) -> Result<(f64, Vec3, Matrix3<f64>)> {
        let n_m = self.shape.len() as f64;
        let mut f = 0.0;
        let mut grad = Vec3::zeros();
        let mut hess = Matrix3::zeros();
        for m in 0..self.plan.n_subarrays() {
            let [(tx, gx, hx), (ty, gy, hy)] = self.thetas(p, m)?;
            let c = correlation(&self.target[m], &self.shape, tx, ty);
            let (pw, g, h) = c.power_derivatives();
            f += pw / n_m;
            grad += (gx * g.x + gy * g.y) / n_m;
            hess += (gx * gx.transpose() * h[(0, 0)]
                + (gx * gy.transpose() + gy * gx.transpose()) * h[(0, 1)]
                + gy * gy.transpose() * h[(1, 1)]
                + hx * g.x
                + hy * g.y)
                / n_m;
        }
        Ok((f, grad, (hess + hess.transpose()) * 0.5))
    }

    fn closed_form_gains(&self, p: &Vec3) -> Result<Vec<(f64, f64)>> {
        (0..self.plan.n_subarrays())
            .map(|m| {
                let [(tx, _, _), (ty, _, _)] = self.thetas(p, m)?;
                let z = correlation(&self.target[m], &self.shape, tx, ty).z / self.shape.len() as f64;
                Ok((wrap_pi(z.arg()), z.norm()))
            })
            .collect()
    }
}

/// Pseudo-true parameter with solver diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoTrue {
    pub gamma: MisParam,
    /// `‖μ_target − μ_F(γ₀)‖²`.
    pub residual: f64,
    /// Norm of the gradient of the squared residual with respect to `γ`.
    pub gradient_norm: f64,
    pub iterations: usize,
}

/// Minimizes the residual by alternating closed-form gains with Newton
/// ascent of the profiled objective over the position, starting at `start`.
pub fn pseudo_true_from(model: &MisModel<'_>, start: &Vec3) -> Result<PseudoTrue> {
    let mut p = *start;
    let (mut f, mut g, mut h) = model.profile(&p)?;
    let mut iterations = 0;
    for _ in 0..200 {
        if g.norm() <= 1e-13 * f.abs().max(1.0) {
            break;
        }
        let dir = match (-h).cholesky() {
            Some(ch) => ch.solve(&g),
            None => g / g.norm() * 1e-3,
        };
        let slope = g.dot(&dir);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = p + dir * t;
            if let Ok(next) = model.profile(&cand) {
                if next.0 >= f + ARMIJO * t * slope && next.0 >= f {
                    accepted = Some((cand, next));
                    break;
                }
            }
            t *= SHRINK;
        }
        let Some((cand, next)) = accepted else { break };
        let stalled = (cand - p).norm() <= 1e-15 * p.norm();
        p = cand;
        (f, g, h) = next;
        iterations += 1;
        if stalled {
            break;
        }
    }
    if !p.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical(format!("pseudo-true search diverged after {iterations} steps")));
    }
    let gamma = MisParam {
        p,
        gains: model.closed_form_gains(&p)?,
    };
    let eps = model.residual(&gamma)?;
    let (v, _) = model.projections(&gamma, &eps, false)?;
    Ok(PseudoTrue {
        residual: eps.iter().flatten().map(|e| e.norm_sqr()).sum(),
        gradient_norm: 2.0 * v.norm(),
        gamma,
        iterations,
    })
}

/// Pseudo-true parameter for the exact-model truth, started at the truth.
pub fn pseudo_true(truth: &TrueParam, plan: &PartitionPlan) -> Result<PseudoTrue> {
    pseudo_true_from(&MisModel::exact(plan, truth)?, &truth.p)
}

/// Joint Gauss-Newton minimization of the residual over all of `γ`. Used to
/// cross-check [`pseudo_true_from`].
pub fn pseudo_true_joint(model: &MisModel<'_>, start: &MisParam) -> Result<PseudoTrue> {
    let mut gamma = start.clone();
    let mut cost = model.residual_norm_sqr(&gamma)?;
    let mut iterations = 0;
    for _ in 0..200 {
        let eps = model.residual(&gamma)?;
        let (v, gram) = model.projections(&gamma, &eps, true)?;
        if v.norm() <= 1e-14 * cost.max(1.0) {
            break;
        }
        let Some(step) = gram.clone().cholesky().map(|c| c.solve(&v)) else {
            return Err(Error::Numerical("Gauss-Newton normal matrix is singular".into()));
        };
        let x = gamma.to_vector();
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = MisParam::from_vector(&(&x + &step * t));
            if let Ok(c) = model.residual_norm_sqr(&cand) {
                if c <= cost - ARMIJO * t * 2.0 * v.dot(&step) || (c < cost && t < 1e-6) {
                    accepted = Some((cand, c));
                    break;
                }
            }
            t *= SHRINK;
        }
        let Some((cand, c)) = accepted else { break };
        let done = cost - c <= 1e-15 * cost;
        gamma = cand;
        cost = c;
        iterations += 1;
        if done {
            break;
        }
    }
    let eps = model.residual(&gamma)?;
    let (v, _) = model.projections(&gamma, &eps, false)?;
    gamma.gains.iter_mut().for_each(|(a, _)| *a = wrap_pi(*a));
    Ok(PseudoTrue {
        residual: cost,
        gradient_norm: 2.0 * v.norm(),
        gamma,
        iterations,
    })
}

/// The two generalized information matrices at `γ₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct McrbMatrices {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// `γ̄ − γ₀`, with gain phases wrapped to `[−π, π)`.
    pub bias: DVector<f64>,
}

/// `A` and `B` at `gamma0`. Second derivatives of `μ_F` enter `A` only through
/// `Re[εᴴ ∂²μ_F/∂γ_a∂γ_b]`, evaluated by central differences of the analytic
/// first derivatives with the residual held fixed.
pub fn mcrb_matrices(
    model: &MisModel<'_>,
    gamma0: &MisParam,
    gamma_bar: &MisParam,
    noise_variance: f64,
) -> Result<McrbMatrices> {
    if !(noise_variance > 0.0) {
        return Err(domain("noise variance must be positive"));
    }
    let eps = model.residual(gamma0)?;
    let (v, gram) = model.projections(gamma0, &eps, true)?;
    let n = gamma0.len();
    let x0 = gamma0.to_vector();
    let mut second = DMatrix::zeros(n, n);
    for b in 0..n {
        let h = 1e-6 * x0[b].abs().max(1.0);
        let mut xp = x0.clone();
        xp[b] += h;
        let mut xm = x0.clone();
        xm[b] -= h;
        let (vp, _) = model.projections(&MisParam::from_vector(&xp), &eps, false)?;
        let (vm, _) = model.projections(&MisParam::from_vector(&xm), &eps, false)?;
        second.set_column(b, &((vp - vm) / (2.0 * h)));
    }
    let second = (&second + second.transpose()) * 0.5;
    let s2 = noise_variance;
    let a = (second - &gram) * (2.0 / s2);
    let b = &v * v.transpose() * (4.0 / (s2 * s2)) + gram * (2.0 / s2);
    let mut bias = gamma_bar.to_vector() - x0;
    for m in 0..gamma0.gains.len() {
        bias[3 + 2 * m] = wrap_pi(bias[3 + 2 * m]);
    }
    Ok(McrbMatrices {
        a: (&a + a.transpose()) * 0.5,
        b: (&b + b.transpose()) * 0.5,
        bias,
    })
}

/// Symmetric inverse; falls back to the pseudo-inverse (and sets the flag)
/// when the matrix is numerically singular.
pub fn symmetric_inverse(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let s = DMatrix::from_diagonal(&m.diagonal().map(|d| {
        let d = d.abs();
        if d > 0.0 {
            d.sqrt().recip()
        } else {
            1.0
        }
    }));
    let eig = (&s * m * &s).symmetric_eigen();
    let top = eig.eigenvalues.amax();
    let tol = 1e-12 * top;
    let singular = eig.eigenvalues.iter().any(|l| l.abs() <= tol);
    let inv_vals = eig.eigenvalues.map(|l| if l.abs() <= tol { 0.0 } else { 1.0 / l });
    let inv = &s * (&eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose()) * &s;
    ((&inv + inv.transpose()) * 0.5, singular)
}

/// Misspecified bound `A⁻¹BA⁻¹ + (γ̄−γ₀)(γ̄−γ₀)ᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct McrbReport {
    pub matrix: DMatrix<f64>,
    /// `sqrt` of the position-block trace.
    pub position: f64,
    /// `A` was singular and a pseudo-inverse was used.
    pub regularized: bool,
}

pub fn mcrb_from(mats: &McrbMatrices) -> McrbReport {
    let (ai, regularized) = symmetric_inverse(&mats.a);
    let sandwich = &ai * &mats.b * &ai;
    let matrix = (&sandwich + sandwich.transpose()) * 0.5 + &mats.bias * mats.bias.transpose();
    let tr = matrix.view((0, 0), (3, 3)).trace();
    McrbReport {
        position: tr.max(0.0).sqrt(),
        matrix,
        regularized,
    }
}

/// Misspecified bound for an exact-model truth.
pub fn mcrb(
    truth: &TrueParam,
    gamma0: &MisParam,
    plan: &PartitionPlan,
    noise_variance: f64,
) -> Result<McrbReport> {
    let model = MisModel::exact(plan, truth)?;
    let mats = mcrb_matrices(&model, gamma0, &truth.nominal_mis_param(plan), noise_variance)?;
    Ok(mcrb_from(&mats))
}

/// Both bounds at one truth.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub fim: Matrix5<f64>,
    pub crb_pos: f64,
    pub mcrb: DMatrix<f64>,
    pub mcrb_pos: f64,
    pub pseudo_true: MisParam,
    pub regularized: bool,
}

pub fn bound_report(truth: &TrueParam, plan: &PartitionPlan, noise_variance: f64) -> Result<BoundReport> {
    let j = fim(&plan.geometry, truth, noise_variance)?;
    let crb_pos = crb_position(&j)?;
    let pt = pseudo_true(truth, plan)?;
    let m = mcrb(truth, &pt.gamma, plan, noise_variance)?;
    Ok(BoundReport {
        fim: j,
        crb_pos,
        mcrb: m.matrix,
        mcrb_pos: m.position,
        pseudo_true: pt.gamma,
        regularized: m.regularized,
    })
}

/// Root mean square; `NaN` for an empty slice.
pub fn rms(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::nearfield_steering;
    use crate::geometry::PolarPoint;

    fn truth(r: f64, omega: f64, phi: f64) -> TrueParam {
        TrueParam::new(PolarPoint::new(r, omega, phi).to_cartesian(), ComplexGain::from_polar(10.0, 0.7)).unwrap()
    }

    fn geom(n: usize) -> ArrayGeometry {
        ArrayGeometry::square(n, 0.015, 0.03).unwrap()
    }

    #[test]
    fn fim_scales_inversely_with_noise() {
        let g = geom(16);
        let t = truth(3.0, 0.4, 0.7);
        let j1 = fim(&g, &t, 1.0).unwrap();
        let j4 = fim(&g, &t, 4.0).unwrap();
        assert!((j1 / 4.0 - j4).amax() <= 1e-12 * j1.amax());
        let c1 = crb_position(&j1).unwrap();
        let c4 = crb_position(&j4).unwrap();
        assert!((c4 / c1 - 2.0).abs() < 1e-9);
        assert!((j1 - j1.transpose()).amax() <= 1e-10 * j1.amax());
    }

    #[test]
    fn fim_columns_match_finite_differences() {
        let g = geom(12);
        let t = truth(2.0, 1.1, 0.5);
        let rows = fim_jacobian(&g, &t).unwrap();
        let mu = |v: [f64; 5]| -> Vec<C64> {
            let a = nearfield_steering(&g, &Vec3::new(v[0], v[1], v[2])).unwrap();
            let alpha = C64::from_polar(v[4], v[3]);
            a.into_iter().map(|x| x * alpha).collect()
        };
        let base = [t.p.x, t.p.y, t.p.z, t.angle_alpha, t.mag_alpha];
        for c in 0..5 {
            let h = 1e-6 * base[c].abs().max(1.0);
            let mut vp = base;
            vp[c] += h;
            let mut vm = base;
            vm[c] -= h;
            let (fp, fm) = (mu(vp), mu(vm));
            let scale = rows.iter().map(|r| r[c].norm()).fold(0.0, f64::max);
            for (i, row) in rows.iter().enumerate() {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                assert!((fd - row[c]).norm() <= 1e-6 * scale, "col {c}");
            }
        }
    }

    #[test]
    fn crb_position_examples() {
        assert!((crb_position(&Matrix5::identity()).unwrap() - 3f64.sqrt()).abs() < 1e-15);
        let mut j = Matrix5::identity();
        for i in 0..3 {
            j[(i, i)] = 4.0;
        }
        assert!((crb_position(&j).unwrap() - 0.75f64.sqrt()).abs() < 1e-15);
        assert!(crb_position(&Matrix5::zeros()).is_err());
    }

    #[test]
    fn close_range_quarter_wavelength_crb_is_sub_centimetre() {
        let g = ArrayGeometry::square(50, 0.0075, 0.03).unwrap();
        let t = truth(3.0, 0.8, 0.6);
        let c = crb_position(&fim(&g, &t, 1.0).unwrap()).unwrap();
        assert!(c < 0.01, "{c}");
    }

    fn small_plan(m: usize) -> PartitionPlan {
        PartitionPlan::new(geom(24), m, m).unwrap()
    }

    #[test]
    fn misspecified_jacobian_matches_finite_differences() {
        let plan = small_plan(2);
        let t = truth(3.0, 0.9, 0.5);
        let model = MisModel::exact(&plan, &t).unwrap();
        let gamma = t.nominal_mis_param(&plan);
        let d = model.jacobian(&gamma).unwrap();
        let x = gamma.to_vector();
        let flat = |v: &DVector<f64>| -> Vec<C64> {
            model.mean(&MisParam::from_vector(v)).unwrap().into_iter().flatten().collect()
        };
        for c in 0..gamma.len() {
            let h = 1e-6 * x[c].abs().max(1.0);
            let mut xp = x.clone();
            xp[c] += h;
            let mut xm = x.clone();
            xm[c] -= h;
            let (fp, fm) = (flat(&xp), flat(&xm));
            let scale = d.column(c).iter().map(|v| v.norm()).fold(0.0, f64::max);
            for i in 0..fp.len() {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                assert!((fd - d[(i, c)]).norm() <= 1e-5 * scale.max(1e-12), "col {c} row {i}");
            }
        }
    }

    #[test]
    fn profile_and_joint_solvers_agree() {
        let plan = small_plan(2);
        let t = truth(3.0, 0.9, 0.5);
        let model = MisModel::exact(&plan, &t).unwrap();
        let alt = pseudo_true_from(&model, &t.p).unwrap();
        let joint = pseudo_true_joint(&model, &t.nominal_mis_param(&plan)).unwrap();
        assert!((alt.residual - joint.residual).abs() <= 1e-10 * alt.residual.max(1.0));
        assert!((alt.gamma.p - joint.gamma.p).norm() < 1e-6);
        let scale: f64 = model.target.iter().flatten().map(|v| v.norm_sqr()).sum::<f64>() * 2.0 * PI / 0.03;
        assert!(alt.gradient_norm <= 1e-8 * scale, "{}", alt.gradient_norm);
    }

    #[test]
    fn gains_at_pseudo_true_are_least_squares() {
        let plan = small_plan(2);
        let t = truth(3.0, 2.0, 0.8);
        let pt = pseudo_true(&t, &plan).unwrap();
        let model = MisModel::exact(&plan, &t).unwrap();
        let mean = model.mean(&pt.gamma).unwrap();
        for m in 0..plan.n_subarrays() {
            let eps: Vec<C64> = model.target[m].iter().zip(&mean[m]).map(|(a, b)| a - b).collect();
            let [(tx, _, _), (ty, _, _)] = model.thetas(&pt.gamma.p, m).unwrap();
            let a = model.steering(tx, ty).unwrap();
            let normal: C64 = a.iter().zip(&eps).map(|(a, e)| a.conj() * e).sum();
            assert!(normal.norm() < 1e-9 * 10.0 * a.len() as f64);
        }
    }

    #[test]
    fn misspecified_bound_grows_with_subarray_count() {
        let g = ArrayGeometry::square(60, 0.015, 0.03).unwrap();
        let t = TrueParam::new(PolarPoint::new(20.0, 0.5, 0.6).to_cartesian(), ComplexGain::from_polar(1.0, 0.7)).unwrap();
        let reports: Vec<BoundReport> = [2, 3, 5]
            .iter()
            .map(|&m| bound_report(&t, &PartitionPlan::new(g, m, m).unwrap(), 0.01).unwrap())
            .collect();
        for w in reports.windows(2) {
            assert!(w[1].mcrb_pos > w[0].mcrb_pos);
        }
        for r in &reports {
            assert!(r.mcrb_pos >= r.crb_pos);
            assert!((r.crb_pos - reports[0].crb_pos).abs() < 1e-15);
        }
    }

    #[test]
    fn single_antenna_subarrays_nest_the_truth() {
        let g = geom(4);
        let plan = PartitionPlan::new(g, 4, 4).unwrap();
        let t = truth(2.0, 0.5, 0.6);
        let pt = pseudo_true(&t, &plan).unwrap();
        assert!(pt.residual < 1e-20);
        let model = MisModel::exact(&plan, &t).unwrap();
        let mats = mcrb_matrices(&model, &pt.gamma, &t.nominal_mis_param(&plan), 1.0).unwrap();
        assert!(mats.bias.norm() < 1e-9);
        let report = mcrb_from(&mats);
        let jac = model.jacobian(&pt.gamma).unwrap();
        let gram = (jac.adjoint() * &jac).map(|v| v.re) * 2.0;
        let (crb, _) = symmetric_inverse(&gram);
        assert!((&report.matrix - &crb).norm() <= 1e-8 * crb.norm());
    }
}
