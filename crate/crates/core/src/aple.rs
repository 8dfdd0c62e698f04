//! The partitioned message-passing location estimator.
//!
//! Each outer iteration runs the per-subarray direction-cosine estimator under
//! the current priors, forms extrinsic messages, fuses them into a location
//! belief and sends back one projected prior per `(subarray, axis)` computed
//! from the belief that leaves that message out.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::aoa::{AoaPosterior, SubarrayShape, SubarraySpectrum};
use crate::channel::{subarray_view, Snapshot};
use crate::error::{config, Result};
use crate::fusion::{
    gaussian_belief, maximize_varpi, nominal_point, projection_message, triangulate, AscentOptions, Varpi,
};
use crate::geometry::{PartitionPlan, Vec3};
use crate::par;
use crate::vonmises::{vm_extrinsic, GaussianBelief3, VonMisesMessage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApleConfig {
    /// Outer message-passing iterations.
    pub t1: usize,
    /// Objective evaluations per subarray estimate.
    pub t2: usize,
    /// Ascent iterations per fusion maximization.
    pub tp: usize,
    pub grad_tol: f64,
    /// Variance of the flat location prior (m²).
    pub prior_position_var: f64,
    /// Variance of the gain prior.
    pub prior_gain_var: f64,
}

impl Default for ApleConfig {
    fn default() -> Self {
        Self {
            t1: 10,
            t2: 50,
            tp: 100,
            grad_tol: 1e-8,
            prior_position_var: 1e6,
            prior_gain_var: 1e6,
        }
    }
}

impl ApleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t1 == 0 || self.t2 == 0 || self.tp == 0 {
            return Err(config("iteration counts must be positive"));
        }
        for (name, v) in [
            ("grad_tol", self.grad_tol),
            ("prior_position_var", self.prior_position_var),
            ("prior_gain_var", self.prior_gain_var),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Non-fatal conditions met while producing an estimate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimateFlags {
    /// A location Hessian was not negative definite and had to be regularized.
    pub regularized_belief: bool,
    /// A projected message was replaced by the uniform one.
    pub degenerate_projection: bool,
    /// Triangulation failed; the ascent started from the nominal point.
    pub triangulation_fallback: bool,
    /// Single subarray: only the bearing is estimated.
    pub direction_only: bool,
    /// Some subarray is inside its own Fraunhofer distance at the estimate.
    pub sfa_violated: bool,
    /// An iterative stage hit its iteration cap.
    pub not_converged: bool,
}

impl EstimateFlags {
    pub fn any(&self) -> bool {
        self.labels().next().is_some()
    }

    pub fn labels(&self) -> impl Iterator<Item = &'static str> {
        [
            (self.regularized_belief, "regularized_belief"),
            (self.degenerate_projection, "degenerate_projection"),
            (self.triangulation_fallback, "triangulation_fallback"),
            (self.direction_only, "direction_only"),
            (self.sfa_violated, "sfa_violated"),
            (self.not_converged, "not_converged"),
        ]
        .into_iter()
        .filter_map(|(on, name)| on.then_some(name))
    }

    pub fn merge(&mut self, other: &Self) {
        self.regularized_belief |= other.regularized_belief;
        self.degenerate_projection |= other.degenerate_projection;
        self.triangulation_fallback |= other.triangulation_fallback;
        self.direction_only |= other.direction_only;
        self.sfa_violated |= other.sfa_violated;
        self.not_converged |= other.not_converged;
    }
}

impl fmt::Display for EstimateFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v: Vec<_> = self.labels().collect();
        f.write_str(&v.join("|"))
    }
}

/// One row of the outer-iteration trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    /// Full fusion objective at the iteration's location maximizer.
    pub varpi: f64,
    pub p: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocationEstimate {
    pub p_hat: Vec3,
    pub belief: GaussianBelief3,
    /// Final per-subarray posteriors (empty for grid estimators).
    pub posteriors: Vec<AoaPosterior>,
    pub trace: Vec<IterationRecord>,
    pub flags: EstimateFlags,
}

/// Runs the estimator on one snapshot.
pub fn run_aple(snapshot: &Snapshot, plan: &PartitionPlan, cfg: &ApleConfig) -> Result<LocationEstimate> {
    cfg.validate()?;
    snapshot.check_len(&plan.geometry)?;
    let m_count = plan.n_subarrays();
    let shape = SubarrayShape::of_plan(plan);
    let spectra = par::map_range(m_count, |m| {
        SubarraySpectrum::new(subarray_view(snapshot, plan, m)?, shape, snapshot.noise_variance)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let centers = plan.centers();
    let nominal_range = 2.0 * plan.geometry.region_boundaries().fresnel;
    let opts = AscentOptions {
        max_iter: cfg.tp,
        grad_tol: cfg.grad_tol,
    };
    let mut flags = EstimateFlags::default();

    let estimate_all = |priors: &[VonMisesMessage]| {
        par::map_range(m_count, |m| spectra[m].posterior(&priors[2 * m], &priors[2 * m + 1], cfg.t2))
    };
    let extrinsics = |posts: &[AoaPosterior], priors: &[VonMisesMessage]| -> Vec<VonMisesMessage> {
        posts
            .iter()
            .enumerate()
            .flat_map(|(m, p)| {
                [
                    vm_extrinsic(&p.theta_x, &priors[2 * m]),
                    vm_extrinsic(&p.theta_y, &priors[2 * m + 1]),
                ]
            })
            .collect()
    };

    let mut priors = vec![VonMisesMessage::uniform(); 2 * m_count];

    if m_count == 1 {
        let posts = estimate_all(&priors);
        let msgs = extrinsics(&posts, &priors);
        let p_hat = nominal_point(&msgs, nominal_range).unwrap_or(Vec3::new(0.0, 0.0, nominal_range));
        flags.direction_only = true;
        let belief = GaussianBelief3::new(p_hat, nalgebra::Matrix3::identity() * cfg.prior_position_var)?;
        return Ok(LocationEstimate {
            p_hat,
            belief,
            posteriors: posts,
            trace: Vec::new(),
            flags,
        });
    }

    let mut start: Option<Vec3> = None;
    let mut trace = Vec::with_capacity(cfg.t1);
    let mut last = None;
    for iter in 0..cfg.t1 {
        let posts = estimate_all(&priors);
        let msgs = extrinsics(&posts, &priors);
        let init = match start {
            Some(p) => p,
            None => triangulate(centers, &msgs, nominal_range).unwrap_or_else(|| {
                flags.triangulation_fallback = true;
                nominal_point(&msgs, nominal_range).unwrap_or(Vec3::new(0.0, 0.0, nominal_range))
            }),
        };
        let full = maximize_varpi(&init, &Varpi::new(centers, &msgs, None)?, opts)?;
        if full.iterations >= cfg.tp {
            flags.not_converged = true;
        }
        trace.push(IterationRecord {
            iter,
            varpi: full.value,
            p: full.point,
        });
        start = Some(full.point);

        if iter + 1 < cfg.t1 {
            let refreshed = par::map_range(2 * m_count, |j| {
                let mut f = EstimateFlags::default();
                let obj = match Varpi::new(centers, &msgs, Some(j)) {
                    Ok(o) => o,
                    Err(_) => {
                        f.degenerate_projection = true;
                        return (VonMisesMessage::uniform(), f);
                    }
                };
                let Ok(loo) = maximize_varpi(&full.point, &obj, opts) else {
                    f.degenerate_projection = true;
                    return (VonMisesMessage::uniform(), f);
                };
                match gaussian_belief(&loo.point, &loo.hessian) {
                    Ok((belief, regularized)) => {
                        f.regularized_belief = regularized;
                        let (msg, degenerate) = projection_message(&belief, &centers[j / 2], j % 2);
                        f.degenerate_projection = degenerate;
                        (msg, f)
                    }
                    Err(_) => {
                        f.degenerate_projection = true;
                        (VonMisesMessage::uniform(), f)
                    }
                }
            });
            for (j, (msg, f)) in refreshed.into_iter().enumerate() {
                priors[j] = msg;
                flags.merge(&f);
            }
        }
        last = Some((full, posts));
    }

    let (full, posts) = last.expect("at least one iteration");
    let (belief, regularized) = gaussian_belief(&full.point, &full.hessian)?;
    flags.regularized_belief |= regularized;
    flags.sfa_violated = plan.sfa_check(&full.point).iter().any(|ok| !ok);
    Ok(LocationEstimate {
        p_hat: full.point,
        belief,
        posteriors: posts,
        trace,
        flags,
    })
}
