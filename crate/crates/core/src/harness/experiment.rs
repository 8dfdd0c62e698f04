//! Monte Carlo execution and RMSE aggregation.

use std::f64::consts::PI;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{AngleBins, ExperimentConfig, Method};
use crate::aple::{run_aple, ApleConfig, EstimateFlags, LocationEstimate};
use crate::bounds::{bound_report, crb_position, fim, rms, TrueParam};
use crate::channel::{noise_variance_for_snr_db, synthesize_snapshot, trial_seed, ComplexGain, Snapshot};
use crate::eaple::{bca_refine, EapleConfig, MlObjective, Refinement};
use crate::error::{config, Result};
use crate::fusion::gaussian_belief;
use crate::geometry::{PartitionPlan, PolarPoint, UeLocation, Vec3};
use crate::omp::{omp_estimate, PolarGrid, Window};
use crate::par;

/// APLE followed by block coordinate ascent on the exact likelihood.
///
/// The returned belief is the Laplace approximation of the likelihood at the
/// refined point.
pub fn run_eaple(
    snapshot: &Snapshot,
    plan: &PartitionPlan,
    aple_cfg: &ApleConfig,
    eaple_cfg: &EapleConfig,
) -> Result<(LocationEstimate, Refinement)> {
    let init = run_aple(snapshot, plan, aple_cfg)?;
    refine_from(snapshot, plan, init.flags, &PolarPoint::from_cartesian(&init.p_hat), eaple_cfg)
}

/// Refinement from an arbitrary start, packaged as a [`LocationEstimate`].
pub fn refine_from(
    snapshot: &Snapshot,
    plan: &PartitionPlan,
    mut flags: EstimateFlags,
    init: &PolarPoint,
    eaple_cfg: &EapleConfig,
) -> Result<(LocationEstimate, Refinement)> {
    let refined = bca_refine(snapshot, &plan.geometry, init, eaple_cfg)?;
    let p_hat = refined.point.to_cartesian();
    let (_, _, hess) = MlObjective::new(snapshot, &plan.geometry)?.derivatives_at(&p_hat);
    let (belief, regularized) = gaussian_belief(&p_hat, &hess)?;
    flags.regularized_belief |= regularized;
    flags.not_converged |= !refined.converged;
    flags.sfa_violated = plan.sfa_check(&p_hat).iter().any(|ok| !ok);
    Ok((
        LocationEstimate {
            p_hat,
            belief,
            posteriors: Vec::new(),
            trace: Vec::new(),
            flags,
        },
        refined,
    ))
}

/// One estimator's result on one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: Method,
    /// `None` when the estimator failed.
    pub p_hat: Option<Vec3>,
    pub err_m: Option<f64>,
    pub runtime_s: Option<f64>,
    /// Warning labels, or the failure message.
    pub flags: String,
}

impl MethodOutcome {
    pub fn failed(&self) -> bool {
        self.p_hat.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub snr_db: f64,
    pub r: f64,
    pub omega: f64,
    pub phi: f64,
    pub gain: ComplexGain,
    pub outcomes: Vec<MethodOutcome>,
    pub crb: Option<f64>,
    pub mcrb: Option<f64>,
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseSummary {
    pub sweep_axis: String,
    pub sweep_value: f64,
    pub method: String,
    pub rmse_m: Option<f64>,
    pub trials_ok: usize,
    pub trials_flagged: usize,
    pub mean_runtime_s: Option<f64>,
    pub crb_m: Option<f64>,
    pub mcrb_m: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Snr,
    /// Square array side `N_x = N_y`, subarray size held fixed.
    Size,
    /// UE range.
    Distance,
    /// Total subarray count `M` (a perfect square).
    M,
}

impl SweepAxis {
    pub fn label(&self) -> &'static str {
        match self {
            SweepAxis::Snr => "snr_db",
            SweepAxis::Size => "size",
            SweepAxis::Distance => "distance",
            SweepAxis::M => "subarrays",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "snr" | "snr_db" => Ok(SweepAxis::Snr),
            "size" => Ok(SweepAxis::Size),
            "distance" | "r" => Ok(SweepAxis::Distance),
            "m" | "M" | "subarrays" => Ok(SweepAxis::M),
            _ => Err(config(format!("unknown sweep axis {s:?}"))),
        }
    }
}

/// Records and summary rows of one sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointResult {
    pub axis: SweepAxis,
    pub value: f64,
    pub records: Vec<TrialRecord>,
    pub summary: Vec<RmseSummary>,
}

impl PointResult {
    /// Fraction of estimator calls that failed.
    pub fn failure_fraction(&self) -> f64 {
        let total: usize = self.records.iter().map(|r| r.outcomes.len()).sum();
        let failed: usize = self
            .records
            .iter()
            .flat_map(|r| &r.outcomes)
            .filter(|o| o.failed())
            .count();
        if total == 0 {
            0.0
        } else {
            failed as f64 / total as f64
        }
    }
}

/// Random quantities of one trial, derived from the master seed and the
/// trial index alone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialDraw {
    pub seed: u64,
    pub q: PolarPoint,
    pub gain: ComplexGain,
    /// Start point for [`Method::EapleRandom`].
    pub random_init: PolarPoint,
}

pub fn draw_trial(cfg: &ExperimentConfig, trial: usize) -> TrialDraw {
    let seed = trial_seed(cfg.seed, trial as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = cfg.r.draw(&mut rng);
    let omega = cfg.omega.draw(&mut rng);
    let phi = cfg.phi.draw(&mut rng);
    let gain = ComplexGain::from_polar(cfg.gain_magnitude, rng.random_range(0.0..2.0 * PI));
    let ri = &cfg.random_init;
    let random_init = PolarPoint::new(ri.r.draw(&mut rng), ri.omega.draw(&mut rng), ri.phi.draw(&mut rng));
    TrialDraw {
        seed,
        q: PolarPoint::new(r, omega, phi),
        gain,
        random_init,
    }
}

/// Search grid from the OMP settings; `truth` centres the optional window.
pub fn omp_grid(cfg: &ExperimentConfig, plan: &PartitionPlan, truth: &PolarPoint) -> Result<PolarGrid> {
    let s = &cfg.omp;
    let [lo, hi] = match s.r_range {
        Some(r) => r,
        None => {
            let b = plan.geometry.region_boundaries();
            [b.fresnel.max(0.5), 1.5 * b.fraunhofer]
        }
    };
    let (rw, ow, pw) = match s.window {
        None => (None, None, None),
        Some(w) => (
            Some(Window {
                lo: truth.r - w.r_half_width,
                hi: truth.r + w.r_half_width,
            }),
            Some(Window {
                lo: truth.omega - w.angle_half_width,
                hi: truth.omega + w.angle_half_width,
            }),
            Some(Window {
                lo: truth.phi - w.angle_half_width,
                hi: truth.phi + w.angle_half_width,
            }),
        ),
    };
    PolarGrid::with_steps(lo, hi, s.r_step, s.angle_step, rw, ow, pw)
}

fn run_method(
    method: Method,
    cfg: &ExperimentConfig,
    plan: &PartitionPlan,
    snapshot: &Snapshot,
    draw: &TrialDraw,
) -> Result<LocationEstimate> {
    match method {
        Method::Aple => run_aple(snapshot, plan, &cfg.aple),
        Method::Eaple => run_eaple(snapshot, plan, &cfg.aple, &cfg.eaple).map(|(e, _)| e),
        Method::EapleRandom => {
            refine_from(snapshot, plan, EstimateFlags::default(), &draw.random_init, &cfg.eaple).map(|(e, _)| e)
        }
        Method::Omp => omp_estimate(snapshot, &plan.geometry, &omp_grid(cfg, plan, &draw.q)?),
    }
}

/// The snapshot every estimator sees in trial `draw`.
pub fn trial_snapshot(cfg: &ExperimentConfig, plan: &PartitionPlan, draw: &TrialDraw, snr_db: f64) -> Result<Snapshot> {
    let location = UeLocation::from_polar(draw.q)?;
    let noise_variance = noise_variance_for_snr_db(cfg.gain_magnitude, snr_db);
    synthesize_snapshot(&plan.geometry, &location, draw.gain, noise_variance, trial_seed(draw.seed, 1))
}

fn run_trial(cfg: &ExperimentConfig, plan: &PartitionPlan, trial: usize, snr_db: f64) -> Result<TrialRecord> {
    let draw = draw_trial(cfg, trial);
    let location = UeLocation::from_polar(draw.q)?;
    let snapshot = trial_snapshot(cfg, plan, &draw, snr_db)?;
    let noise_variance = snapshot.noise_variance;

    let outcomes = cfg
        .methods
        .iter()
        .map(|&method| {
            let start = Instant::now();
            let result = run_method(method, cfg, plan, &snapshot, &draw);
            let runtime_s = cfg.record_runtime.then(|| start.elapsed().as_secs_f64());
            match result {
                Ok(est) => MethodOutcome {
                    method,
                    p_hat: Some(est.p_hat),
                    err_m: Some((est.p_hat - location.cartesian).norm()),
                    runtime_s,
                    flags: est.flags.to_string(),
                },
                Err(e) => MethodOutcome {
                    method,
                    p_hat: None,
                    err_m: None,
                    runtime_s,
                    flags: format!("failed: {e}"),
                },
            }
        })
        .collect();

    let truth = TrueParam::new(location.cartesian, draw.gain)?;
    let (crb, mcrb) = match (cfg.bounds.crb, cfg.bounds.mcrb) {
        (_, true) => match bound_report(&truth, plan, noise_variance) {
            Ok(b) => (cfg.bounds.crb.then_some(b.crb_pos), Some(b.mcrb_pos)),
            Err(_) => (None, None),
        },
        (true, false) => (
            fim(&plan.geometry, &truth, noise_variance)
                .and_then(|j| crb_position(&j))
                .ok(),
            None,
        ),
        (false, false) => (None, None),
    };

    Ok(TrialRecord {
        trial,
        seed: draw.seed,
        snr_db,
        r: draw.q.r,
        omega: draw.q.omega,
        phi: draw.q.phi,
        gain: draw.gain,
        outcomes,
        crb,
        mcrb,
    })
}

/// Aggregates records into one summary row per method, in configuration order.
pub fn summarize(axis: SweepAxis, value: f64, methods: &[Method], records: &[TrialRecord]) -> Vec<RmseSummary> {
    let opt_rms = |v: Vec<f64>| (!v.is_empty()).then(|| rms(&v));
    // Bounds: arithmetic mean of the per-draw values.
    let opt_mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let crb_m = opt_mean(records.iter().filter_map(|r| r.crb).collect());
    let mcrb_m = opt_mean(records.iter().filter_map(|r| r.mcrb).collect());
    methods
        .iter()
        .enumerate()
        .map(|(k, method)| {
            let outcomes: Vec<&MethodOutcome> = records.iter().map(|r| &r.outcomes[k]).collect();
            let errs: Vec<f64> = outcomes.iter().filter_map(|o| o.err_m).collect();
            let times: Vec<f64> = outcomes.iter().filter_map(|o| o.runtime_s).collect();
            RmseSummary {
                sweep_axis: axis.label().to_string(),
                sweep_value: value,
                method: method.label().to_string(),
                rmse_m: opt_rms(errs.clone()),
                trials_ok: errs.len(),
                trials_flagged: outcomes.len() - errs.len(),
                mean_runtime_s: (!times.is_empty()).then(|| times.iter().sum::<f64>() / times.len() as f64),
                crb_m,
                mcrb_m,
            }
        })
        .collect()
}

fn run_point(cfg: &ExperimentConfig, axis: SweepAxis, value: f64, snr_db: f64) -> Result<PointResult> {
    cfg.validate()?;
    let plan = cfg.plan()?;
    let records = par::with_workers(cfg.workers, || {
        par::map_range(cfg.trials, |t| run_trial(cfg, &plan, t, snr_db))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let summary = summarize(axis, value, &cfg.methods, &records);
    Ok(PointResult {
        axis,
        value,
        records,
        summary,
    })
}

/// Runs every configured SNR value as one sweep point.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<PointResult>> {
    cfg.validate()?;
    cfg.snr_db
        .iter()
        .map(|&snr| run_point(cfg, SweepAxis::Snr, snr, snr))
        .collect()
}

/// Configuration of sweep point `value` along `axis`.
pub fn sweep_point_config(base: &ExperimentConfig, axis: SweepAxis, value: f64) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    match axis {
        SweepAxis::Snr => cfg.snr_db = vec![value],
        SweepAxis::Distance => cfg.r = super::config::Sampled::Fixed(value),
        SweepAxis::Size => {
            let n = integer(value, "array size")?;
            let (sub_x, sub_y) = (base.geometry.n_x / base.partition.m_x, base.geometry.n_y / base.partition.m_y);
            if n % sub_x != 0 || n % sub_y != 0 {
                return Err(config(format!(
                    "array side {n} is not a multiple of the subarray size {sub_x}x{sub_y}"
                )));
            }
            cfg.geometry.n_x = n;
            cfg.geometry.n_y = n;
            cfg.partition.m_x = n / sub_x;
            cfg.partition.m_y = n / sub_y;
        }
        SweepAxis::M => {
            let m = integer(value, "subarray count")?;
            let side = (m as f64).sqrt().round() as usize;
            if side * side != m {
                return Err(config(format!("subarray count {m} is not a perfect square")));
            }
            cfg.partition.m_x = side;
            cfg.partition.m_y = side;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn integer(value: f64, what: &str) -> Result<usize> {
    if value >= 1.0 && value.fract() == 0.0 {
        Ok(value as usize)
    } else {
        Err(config(format!("{what} must be a positive integer, got {value}")))
    }
}

/// One sweep point per value. Axes other than SNR need a single SNR value.
pub fn sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<PointResult>> {
    base.validate()?;
    if values.is_empty() {
        return Err(config("sweep needs at least one value"));
    }
    if axis != SweepAxis::Snr && base.snr_db.len() != 1 {
        return Err(config("sweeps over size, distance or M need exactly one SNR value"));
    }
    let configs = values
        .iter()
        .map(|&v| sweep_point_config(base, axis, v))
        .collect::<Result<Vec<_>>>()?;
    configs
        .iter()
        .zip(values)
        .map(|(cfg, &v)| run_point(cfg, axis, v, cfg.snr_db[0]))
        .collect()
}

/// RMSE of `method` per `(ω, φ)` bin, row-major over `ω` bins. Empty bins
/// are `None`.
pub fn angle_binned_rmse(records: &[TrialRecord], method: Method, bins: AngleBins) -> Vec<Vec<Option<f64>>> {
    let mut sq = vec![vec![(0.0, 0usize); bins.phi]; bins.omega];
    for rec in records {
        let Some(err) = rec.outcomes.iter().find(|o| o.method == method).and_then(|o| o.err_m) else {
            continue;
        };
        let i = ((rec.omega / (2.0 * PI)) * bins.omega as f64).floor().clamp(0.0, (bins.omega - 1) as f64) as usize;
        let j = ((rec.phi / (PI / 2.0)) * bins.phi as f64).floor().clamp(0.0, (bins.phi - 1) as f64) as usize;
        sq[i][j].0 += err * err;
        sq[i][j].1 += 1;
    }
    sq.into_iter()
        .map(|row| {
            row.into_iter()
                .map(|(s, n)| (n > 0).then(|| (s / n as f64).sqrt()))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::{GeometryConfig, PartitionConfig, Sampled, Spacing};

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            geometry: GeometryConfig {
                n_x: 24,
                n_y: 24,
                spacing: Spacing::Wavelengths(0.25),
                frequency_hz: 10e9,
            },
            partition: PartitionConfig { m_x: 2, m_y: 2 },
            r: Sampled::Uniform([1.0, 2.0]),
            phi: Sampled::Uniform([0.2, 1.2]),
            trials: 6,
            seed: 11,
            snr_db: vec![20.0],
            methods: vec![Method::Aple, Method::Eaple],
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn rmse_matches_direct_recomputation() {
        let points = run_experiment(&small()).unwrap();
        let p = &points[0];
        assert_eq!(p.summary.len(), 2);
        for (k, row) in p.summary.iter().enumerate() {
            let errs: Vec<f64> = p.records.iter().filter_map(|r| r.outcomes[k].err_m).collect();
            let direct = (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt();
            assert!((row.rmse_m.unwrap() - direct).abs() <= 1e-12 * direct);
            assert_eq!(row.trials_ok + row.trials_flagged, 6);
            let crbs: Vec<f64> = p.records.iter().filter_map(|r| r.crb).collect();
            let mean = crbs.iter().sum::<f64>() / crbs.len() as f64;
            assert!((row.crb_m.unwrap() - mean).abs() <= 1e-12 * mean);
        }
        assert!(p.summary[1].rmse_m.unwrap() < 0.05);
    }

    #[test]
    fn deterministic_given_seed() {
        let mut cfg = small();
        cfg.record_runtime = false;
        cfg.trials = 3;
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a, b);
        cfg.seed += 1;
        let c = run_experiment(&cfg).unwrap();
        assert_ne!(a[0].records[0].r, c[0].records[0].r);
    }

    #[test]
    fn noiseless_refinement_is_exact() {
        let mut cfg = small();
        cfg.snr_db = vec![200.0];
        cfg.trials = 3;
        cfg.bounds.mcrb = false;
        let p = &run_experiment(&cfg).unwrap()[0];
        assert!(p.summary[1].rmse_m.unwrap() < 1e-4, "{:?}", p.summary[1]);
    }

    #[test]
    fn bounds_use_the_trial_truths() {
        let mut cfg = small();
        cfg.trials = 2;
        cfg.methods = vec![Method::Aple];
        let p = &run_experiment(&cfg).unwrap()[0];
        for rec in &p.records {
            let truth = TrueParam::new(PolarPoint::new(rec.r, rec.omega, rec.phi).to_cartesian(), rec.gain).unwrap();
            let plan = cfg.plan().unwrap();
            let sigma2 = noise_variance_for_snr_db(1.0, rec.snr_db);
            let crb = crb_position(&fim(&plan.geometry, &truth, sigma2).unwrap()).unwrap();
            assert!((rec.crb.unwrap() - crb).abs() < 1e-12 * crb);
        }
    }

    #[test]
    fn sweep_point_configs() {
        let base = small();
        let c = sweep_point_config(&base, SweepAxis::Size, 48.0).unwrap();
        assert_eq!((c.geometry.n_x, c.partition.m_x), (48, 4));
        let c = sweep_point_config(&base, SweepAxis::M, 9.0).unwrap();
        assert_eq!((c.partition.m_x, c.partition.m_y), (3, 3));
        assert!(sweep_point_config(&base, SweepAxis::M, 8.0).is_err());
        assert!(sweep_point_config(&base, SweepAxis::Size, 30.0).is_err());
        let c = sweep_point_config(&base, SweepAxis::Distance, 7.0).unwrap();
        assert_eq!(c.r, Sampled::Fixed(7.0));
        let mut two = base.clone();
        two.snr_db = vec![0.0, 10.0];
        assert!(sweep(&two, SweepAxis::Distance, &[1.0]).is_err());
    }

    #[test]
    fn angle_bins_partition_the_trials() {
        let mut cfg = small();
        cfg.trials = 8;
        cfg.methods = vec![Method::Aple];
        cfg.bounds = crate::harness::config::BoundSelection { crb: false, mcrb: false };
        let p = &run_experiment(&cfg).unwrap()[0];
        let grid = angle_binned_rmse(&p.records, Method::Aple, AngleBins { omega: 1, phi: 1 });
        assert!((grid[0][0].unwrap() - p.summary[0].rmse_m.unwrap()).abs() < 1e-12);
        let grid = angle_binned_rmse(&p.records, Method::Aple, AngleBins { omega: 4, phi: 3 });
        assert_eq!((grid.len(), grid[0].len()), (4, 3));
    }

    #[test]
    fn failures_are_counted_not_dropped() {
        let mut cfg = small();
        cfg.trials = 2;
        cfg.methods = vec![Method::Omp];
        cfg.bounds.mcrb = false;
        // Range bracket that excludes every node: the grid cannot be built.
        cfg.omp.r_range = Some([5.0, 6.0]);
        cfg.omp.window = Some(crate::harness::config::OmpWindow {
            r_half_width: 0.2,
            angle_half_width: 0.04,
        });
        let p = &run_experiment(&cfg).unwrap()[0];
        assert_eq!(p.summary[0].trials_flagged, 2);
        assert_eq!(p.summary[0].rmse_m, None);
        assert!(p.records[0].outcomes[0].flags.starts_with("failed"));
        assert!((p.failure_fraction() - 1.0).abs() < 1e-15);
    }
}
