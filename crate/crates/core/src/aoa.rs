//! Per-subarray direction-cosine posteriors.
//!
//! Under the plane-wave subarray model the samples of one subarray are a
//! single 2-D tone `α_m a_F(θ_x, θ_y)`. With the gain concentrated out, the
//! log-likelihood is `|a_F(θ)ᴴ y_m|² / (σ² N_m)`. The estimator adds the Von
//! Mises log-priors, finds the mode with a zero-padded 2-D FFT followed by
//! Newton steps, and fits one Von Mises factor per axis from the curvature at
//! the mode.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Vector2};
use rustfft::FftPlanner;

use crate::channel::{linear_phase, ComplexGain, C64};
use crate::error::{domain, Result};
use crate::geometry::PartitionPlan;
use crate::vonmises::{vm_extrinsic, VonMisesMessage};

const PAD: usize = 4;
const MAX_NEWTON: usize = 20;
const GRAD_TOL: f64 = 1e-10;
const THETA_LIMIT: f64 = 1.0 - 1e-9;

/// Lattice of one subarray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubarrayShape {
    pub n_x: usize,
    pub n_y: usize,
    pub d_x: f64,
    pub d_y: f64,
    pub wavelength: f64,
}

impl SubarrayShape {
    pub fn of_plan(plan: &PartitionPlan) -> Self {
        let g = &plan.geometry;
        Self {
            n_x: plan.sub_nx,
            n_y: plan.sub_ny,
            d_x: g.d_x,
            d_y: g.d_y,
            wavelength: g.wavelength,
        }
    }

    pub fn len(&self) -> usize {
        self.n_x * self.n_y
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Phase slope per unit direction cosine along x, `2π d_x / λ`.
    pub fn slope_x(&self) -> f64 {
        2.0 * PI * self.d_x / self.wavelength
    }

    pub fn slope_y(&self) -> f64 {
        2.0 * PI * self.d_y / self.wavelength
    }
}

/// Direction-cosine posteriors and least-squares gain of one subarray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AoaPosterior {
    pub theta_x: VonMisesMessage,
    pub theta_y: VonMisesMessage,
    pub alpha_hat: ComplexGain,
}

impl AoaPosterior {
    fn uninformative() -> Self {
        Self {
            theta_x: VonMisesMessage::uniform(),
            theta_y: VonMisesMessage::uniform(),
            alpha_hat: ComplexGain(C64::new(0.0, 0.0)),
        }
    }
}

/// Correlation `z(θ) = a_F(θ)ᴴ y` and its partial derivatives.
#[derive(Debug, Clone, Copy)]
pub struct Correlation {
    pub z: C64,
    pub z_x: C64,
    pub z_y: C64,
    pub z_xx: C64,
    pub z_xy: C64,
    pub z_yy: C64,
}

impl Correlation {
    /// `|z|²`, its gradient and Hessian in `(θ_x, θ_y)`.
    pub fn power_derivatives(&self) -> (f64, Vector2<f64>, Matrix2<f64>) {
        let c = &self;
        let g = c.z.norm_sqr();
        let grad = Vector2::new(2.0 * (c.z.conj() * c.z_x).re, 2.0 * (c.z.conj() * c.z_y).re);
        let hxx = 2.0 * (c.z_x.norm_sqr() + (c.z.conj() * c.z_xx).re);
        let hyy = 2.0 * (c.z_y.norm_sqr() + (c.z.conj() * c.z_yy).re);
        let hxy = 2.0 * ((c.z_y.conj() * c.z_x).re + (c.z.conj() * c.z_xy).re);
        (g, grad, Matrix2::new(hxx, hxy, hxy, hyy))
    }
}

/// Evaluates `a_F(θ)ᴴ y` with first and second derivatives. `y` is in local
/// `(k, l)` row-major order.
pub fn correlation(y: &[C64], shape: &SubarrayShape, theta_x: f64, theta_y: f64) -> Correlation {
    let (cx, cy) = (shape.slope_x(), shape.slope_y());
    let ax = linear_phase(shape.n_x, cx * theta_x);
    let ay = linear_phase(shape.n_y, cy * theta_y);
    let kc = (shape.n_x as f64 - 1.0) / 2.0;
    let lc = (shape.n_y as f64 - 1.0) / 2.0;
    let zero = C64::new(0.0, 0.0);
    let mut out = Correlation {
        z: zero,
        z_x: zero,
        z_y: zero,
        z_xx: zero,
        z_xy: zero,
        z_yy: zero,
    };
    for (k, axk) in ax.iter().enumerate() {
        let row = &y[k * shape.n_y..(k + 1) * shape.n_y];
        let (mut w, mut w1, mut w2) = (zero, zero, zero);
        for (l, (yv, ayl)) in row.iter().zip(&ay).enumerate() {
            let t = ayl.conj() * yv;
            let s = cy * (l as f64 - lc);
            // d/dθ_y of conj(e^{j s θ_y}) is -j s times itself.
            w += t;
            w1 += t * C64::new(0.0, -s);
            w2 -= t * (s * s);
        }
        let sx = cx * (k as f64 - kc);
        let base = axk.conj();
        let dx = base * C64::new(0.0, -sx);
        out.z += base * w;
        out.z_x += dx * w;
        out.z_xx -= base * w * (sx * sx);
        out.z_y += base * w1;
        out.z_xy += dx * w1;
        out.z_yy += base * w2;
    }
    out
}

/// Peak-search state for one subarray: the padded periodogram is computed
/// once and reused whenever only the priors change.
#[derive(Debug, Clone)]
pub struct SubarraySpectrum {
    y: Vec<C64>,
    shape: SubarrayShape,
    noise_variance: f64,
    power: Vec<f64>,
    cand_x: Vec<(usize, f64)>,
    cand_y: Vec<(usize, f64)>,
    degenerate: bool,
}

/// Maps a refined cosine back into the visible region. A shift by the
/// spatial period `2π / slope` leaves the objective unchanged whenever that
/// period is an even integer (the prior terms are 2-periodic); otherwise the
/// value is clipped.
fn fold(theta: f64, slope: f64) -> f64 {
    let period = 2.0 * PI / slope;
    let half = period / 2.0;
    if theta.abs() > 1.0 && (half - half.round()).abs() < 1e-9 {
        let shifted = theta - period * (theta / period).round();
        if shifted.abs() <= 1.0 {
            return shifted.clamp(-THETA_LIMIT, THETA_LIMIT);
        }
    }
    theta.clamp(-THETA_LIMIT, THETA_LIMIT)
}

fn candidates(n_bins: usize, slope: f64) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    for p in 0..n_bins {
        let w = 2.0 * PI * p as f64 / n_bins as f64;
        let w = if w >= PI { w - 2.0 * PI } else { w };
        // Every alias `w + 2πn` that maps into the visible region.
        let n_max = (slope / (2.0 * PI)).ceil() as i64 + 1;
        for n in -n_max..=n_max {
            let theta = (w + 2.0 * PI * n as f64) / slope;
            if theta.abs() <= 1.0 {
                out.push((p, theta));
            }
        }
    }
    out
}

impl SubarraySpectrum {
    pub fn new(y: Vec<C64>, shape: SubarrayShape, noise_variance: f64) -> Result<Self> {
        if y.len() != shape.len() || shape.is_empty() {
            return Err(domain(format!(
                "subarray samples have length {}, expected {}",
                y.len(),
                shape.len()
            )));
        }
        if !(noise_variance > 0.0 && noise_variance.is_finite()) {
            return Err(domain("noise variance must be positive"));
        }
        let degenerate = y.iter().all(|v| v.norm_sqr() == 0.0);
        let (px, py) = (PAD * shape.n_x, PAD * shape.n_y);
        let mut grid = vec![C64::new(0.0, 0.0); px * py];
        for k in 0..shape.n_x {
            for l in 0..shape.n_y {
                grid[k * py + l] = y[k * shape.n_y + l];
            }
        }
        let mut planner = FftPlanner::<f64>::new();
        let fy = planner.plan_fft_forward(py);
        for row in grid.chunks_exact_mut(py) {
            fy.process(row);
        }
        let fx = planner.plan_fft_forward(px);
        let mut col = vec![C64::new(0.0, 0.0); px];
        for l in 0..py {
            for k in 0..px {
                col[k] = grid[k * py + l];
            }
            fx.process(&mut col);
            for k in 0..px {
                grid[k * py + l] = col[k];
            }
        }
        Ok(Self {
            power: grid.iter().map(|v| v.norm_sqr()).collect(),
            cand_x: candidates(px, shape.slope_x()),
            cand_y: candidates(py, shape.slope_y()),
            y,
            shape,
            noise_variance,
            degenerate,
        })
    }

    pub fn shape(&self) -> &SubarrayShape {
        &self.shape
    }

    fn scale(&self) -> f64 {
        1.0 / (self.noise_variance * self.shape.len() as f64)
    }

    /// Log-posterior (up to a constant) with gradient and Hessian.
    pub fn objective(
        &self,
        theta: Vector2<f64>,
        prior_x: &VonMisesMessage,
        prior_y: &VonMisesMessage,
    ) -> (f64, Vector2<f64>, Matrix2<f64>, C64) {
        let c = correlation(&self.y, &self.shape, theta.x, theta.y);
        let (g, mut grad, mut hess) = c.power_derivatives();
        let s = self.scale();
        let mut f = g * s;
        grad *= s;
        hess *= s;
        for (i, pr) in [prior_x, prior_y].into_iter().enumerate() {
            let arg = PI * theta[i] - pr.mu;
            f += pr.kappa * arg.cos();
            grad[i] -= PI * pr.kappa * arg.sin();
            hess[(i, i)] -= PI * PI * pr.kappa * arg.cos();
        }
        (f, grad, hess, c.z)
    }

    fn coarse_peak(&self, prior_x: &VonMisesMessage, prior_y: &VonMisesMessage) -> Vector2<f64> {
        let py = PAD * self.shape.n_y;
        let s = self.scale();
        let lx: Vec<f64> = self.cand_x.iter().map(|&(_, t)| prior_x.log_density(t)).collect();
        let ly: Vec<f64> = self.cand_y.iter().map(|&(_, t)| prior_y.log_density(t)).collect();
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
        for (ix, &(bx, tx)) in self.cand_x.iter().enumerate() {
            let row = &self.power[bx * py..(bx + 1) * py];
            for (iy, &(by, ty)) in self.cand_y.iter().enumerate() {
                let v = row[by] * s + lx[ix] + ly[iy];
                if v > best.0 {
                    best = (v, tx, ty);
                }
            }
        }
        Vector2::new(best.1, best.2)
    }

    /// Posterior summary under the given priors. `budget` caps the total
    /// number of objective evaluations in the refinement stage.
    pub fn posterior(
        &self,
        prior_x: &VonMisesMessage,
        prior_y: &VonMisesMessage,
        budget: usize,
    ) -> AoaPosterior {
        if self.degenerate {
            return AoaPosterior::uninformative();
        }
        // The iterate moves freely: the objective is periodic in each
        // cosine, and a peak just past ±1 is reached through its alias.
        let mut theta = self.coarse_peak(prior_x, prior_y);
        let (mut f, mut grad, mut hess, mut z) = self.objective(theta, prior_x, prior_y);
        let mut evals = 1;
        for _ in 0..MAX_NEWTON {
            if grad.norm() <= GRAD_TOL * (1.0 + f.abs()) || evals >= budget {
                break;
            }
            let neg = -hess;
            let dir = match neg.cholesky() {
                Some(ch) => ch.solve(&grad),
                None => grad / grad.norm() * (0.5 / (PAD * self.shape.n_x.max(self.shape.n_y)) as f64),
            };
            let mut t = 1.0;
            let mut moved = false;
            while evals < budget {
                let cand = theta + dir * t;
                let step = cand - theta;
                if step.norm() == 0.0 {
                    break;
                }
                let next = self.objective(cand, prior_x, prior_y);
                evals += 1;
                if next.0 >= f + 1e-4 * grad.dot(&step) && next.0 >= f {
                    theta = cand;
                    (f, grad, hess, z) = next;
                    moved = true;
                    break;
                }
                t *= 0.5;
                if t < 1e-12 {
                    break;
                }
            }
            if !moved {
                break;
            }
        }
        let kx = (-hess[(0, 0)]).max(0.0) / (PI * PI);
        let ky = (-hess[(1, 1)]).max(0.0) / (PI * PI);
        AoaPosterior {
            theta_x: VonMisesMessage::at_theta(fold(theta.x, self.shape.slope_x()), kx),
            theta_y: VonMisesMessage::at_theta(fold(theta.y, self.shape.slope_y()), ky),
            alpha_hat: ComplexGain(z / self.shape.len() as f64),
        }
    }
}

/// One-shot posterior estimate for subarray samples `y_m`.
pub fn estimate_posterior(
    y_m: &[C64],
    shape: &SubarrayShape,
    noise_variance: f64,
    prior_x: &VonMisesMessage,
    prior_y: &VonMisesMessage,
    budget: usize,
) -> Result<AoaPosterior> {
    Ok(SubarraySpectrum::new(y_m.to_vec(), *shape, noise_variance)?.posterior(prior_x, prior_y, budget))
}

/// Extrinsic messages `posterior / prior` per axis.
pub fn extrinsic_from_posterior(
    post: &AoaPosterior,
    prior_x: &VonMisesMessage,
    prior_y: &VonMisesMessage,
) -> (VonMisesMessage, VonMisesMessage) {
    (
        vm_extrinsic(&post.theta_x, prior_x),
        vm_extrinsic(&post.theta_y, prior_y),
    )
}
