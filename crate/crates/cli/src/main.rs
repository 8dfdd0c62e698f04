//! Command-line front end: snapshot synthesis, single-snapshot estimators,
//! bound tables, Monte Carlo sweeps and report rendering.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use nearfield::bounds::{bound_report, crb_position, fim};
use nearfield::channel::{read_snapshot, write_snapshot};
use nearfield::harness::config::{OmpWindow, Spacing};
use nearfield::harness::report::{read_summary_csv, render_markdown};
use nearfield::harness::{
    draw_trial, omp_grid, refine_from, run_experiment, sweep, trial_snapshot, write_outputs, ExperimentConfig,
    Method, PointResult, Sampled, SweepAxis,
};
use nearfield::{omp_estimate, par, run_aple, Error, LocationEstimate, PolarPoint, Snapshot, TrueParam};

#[derive(Parser)]
#[command(name = "nearfield", version, about = "Near-field localization with partitioned antenna arrays")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Experiment settings shared by every subcommand. Flags override values
/// from `--config`.
#[derive(Args)]
struct Common {
    /// JSON experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Antennas per array side.
    #[arg(long)]
    n: Option<usize>,
    /// Subarrays per array side.
    #[arg(long)]
    m: Option<usize>,
    /// Antenna spacing in wavelengths.
    #[arg(long)]
    spacing: Option<f64>,
    /// Carrier frequency in Hz.
    #[arg(long)]
    frequency: Option<f64>,
    /// Fixed UE range in meters.
    #[arg(long, conflicts_with = "r_range")]
    r: Option<f64>,
    /// UE range drawn uniformly from `LO,HI`.
    #[arg(long, value_parser = floats::<2>)]
    r_range: Option<[f64; 2]>,
    /// Comma-separated SNR values in dB.
    #[arg(long, value_delimiter = ',')]
    snr_db: Option<Vec<f64>>,
    /// Comma-separated estimators: aple, eaple, eaple_random, omp.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Worker threads for trial-level parallelism.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesizes the snapshot of one trial and prints its ground truth.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        trial: usize,
        /// Binary snapshot dump.
        #[arg(long)]
        out: PathBuf,
    },
    /// Message-passing estimate from a snapshot dump.
    Aple {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        snapshot: PathBuf,
        /// Prints `iter, varpi, x, y, z` per outer iteration to stderr.
        #[arg(long, short)]
        verbose: bool,
    },
    /// Likelihood refinement from a snapshot dump.
    Eaple {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        snapshot: PathBuf,
        /// Start point `R,OMEGA,PHI`; defaults to the message-passing estimate.
        #[arg(long, value_parser = floats::<3>)]
        init: Option<[f64; 3]>,
        /// Prints `iter, F, r, omega, phi` per outer iteration to stderr.
        #[arg(long, short)]
        verbose: bool,
    },
    /// Grid search from a snapshot dump.
    Omp {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        snapshot: PathBuf,
        /// Range bracket `LO,HI` of the grid.
        #[arg(long, value_parser = floats::<2>)]
        grid_r: Option<[f64; 2]>,
        /// Restricts the grid to a window around `R,OMEGA,PHI`.
        #[arg(long, value_parser = floats::<3>, requires = "window")]
        around: Option<[f64; 3]>,
        /// Window half widths `R_HALF,ANGLE_HALF`.
        #[arg(long, value_parser = floats::<2>, requires = "around")]
        window: Option<[f64; 2]>,
    },
    /// CSV of bounds per truth draw: seed, r, omega, phi, crb_pos, mcrb_pos.
    Bounds {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        /// Skips the misspecified bound.
        #[arg(long)]
        crb_only: bool,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo sweep writing per-trial and summary CSV files.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        trials: usize,
        #[arg(long)]
        out: PathBuf,
        /// snr_db, size, distance or subarrays.
        #[arg(long, default_value = "snr_db")]
        axis: String,
        /// Sweep values; for the SNR axis these replace the configured list.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        /// Leave per-trial wall time out of the CSV output.
        #[arg(long)]
        no_runtime: bool,
    },
    /// Renders summary CSV files as one markdown table.
    Report {
        /// `LABEL=PATH` pairs, one table row each.
        #[arg(long = "summary", required = true)]
        summaries: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses exactly `N` comma-separated numbers.
fn floats<const N: usize>(s: &str) -> Result<[f64; N], String> {
    let v = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    v.try_into().map_err(|v: Vec<f64>| format!("expected {N} comma-separated values, got {}", v.len()))
}

enum Failure {
    Config(String),
    Threshold(String),
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Json(_) => Failure::Config(e.to_string()),
            other => Failure::Other(other.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

fn load_config(common: &Common) -> CliResult<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?,
        None => ExperimentConfig::default(),
    };
    if let Some(n) = common.n {
        cfg.geometry.n_x = n;
        cfg.geometry.n_y = n;
    }
    if let Some(m) = common.m {
        cfg.partition.m_x = m;
        cfg.partition.m_y = m;
    }
    if let Some(s) = common.spacing {
        cfg.geometry.spacing = Spacing::Wavelengths(s);
    }
    if let Some(f) = common.frequency {
        cfg.geometry.frequency_hz = f;
    }
    if let Some(r) = common.r {
        cfg.r = Sampled::Fixed(r);
    }
    if let Some(r) = common.r_range {
        cfg.r = Sampled::Uniform(r);
    }
    if let Some(s) = &common.snr_db {
        cfg.snr_db.clone_from(s);
    }
    if let Some(ms) = &common.methods {
        cfg.methods = ms.iter().map(|m| Method::parse(m)).collect::<Result<_, _>>()?;
    }
    if common.workers.is_some() {
        cfg.workers = common.workers;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_dump(path: &Path) -> CliResult<Snapshot> {
    let file = File::open(path).map_err(|e| Failure::Other(format!("{}: {e}", path.display())))?;
    Ok(read_snapshot(BufReader::new(file))?)
}

fn estimate_json(est: &LocationEstimate) -> serde_json::Value {
    let q = PolarPoint::from_cartesian(&est.p_hat);
    json!({
        "x": est.p_hat.x,
        "y": est.p_hat.y,
        "z": est.p_hat.z,
        "r": q.r,
        "omega": q.omega,
        "phi": q.phi,
        "flags": est.flags.to_string(),
    })
}

fn print_json(v: &serde_json::Value) -> CliResult<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v).map_err(|e| Failure::Other(e.to_string()))?;
    writeln!(out)?;
    Ok(())
}

fn simulate(common: &Common, seed: u64, trial: usize, out: &Path) -> CliResult<()> {
    let mut cfg = load_config(common)?;
    cfg.seed = seed;
    let plan = cfg.plan()?;
    let draw = draw_trial(&cfg, trial);
    let snr_db = cfg.snr_db[0];
    let snap = trial_snapshot(&cfg, &plan, &draw, snr_db)?;
    write_snapshot(BufWriter::new(File::create(out)?), &snap)?;
    let p = draw.q.to_cartesian();
    print_json(&json!({
        "trial": trial,
        "seed": draw.seed,
        "snr_db": snr_db,
        "noise_variance": snap.noise_variance,
        "r": draw.q.r,
        "omega": draw.q.omega,
        "phi": draw.q.phi,
        "x": p.x,
        "y": p.y,
        "z": p.z,
        "gain_re": draw.gain.0.re,
        "gain_im": draw.gain.0.im,
    }))
}

fn aple(common: &Common, snapshot: &Path, verbose: bool) -> CliResult<()> {
    let cfg = load_config(common)?;
    let plan = cfg.plan()?;
    let snap = read_dump(snapshot)?;
    let est = run_aple(&snap, &plan, &cfg.aple)?;
    if verbose {
        let mut err = io::stderr().lock();
        for rec in &est.trace {
            writeln!(err, "{}, {}, {}, {}, {}", rec.iter, rec.varpi, rec.p.x, rec.p.y, rec.p.z)?;
        }
    }
    print_json(&estimate_json(&est))
}

fn eaple(common: &Common, snapshot: &Path, init: Option<[f64; 3]>, verbose: bool) -> CliResult<()> {
    let cfg = load_config(common)?;
    let plan = cfg.plan()?;
    let snap = read_dump(snapshot)?;
    let (start, flags) = match init {
        Some(v) => (PolarPoint::new(v[0], v[1], v[2]), Default::default()),
        None => {
            let est = run_aple(&snap, &plan, &cfg.aple)?;
            (PolarPoint::from_cartesian(&est.p_hat), est.flags)
        }
    };
    let (est, refined) = refine_from(&snap, &plan, flags, &start, &cfg.eaple)?;
    if verbose {
        let mut err = io::stderr().lock();
        for (iter, (f, q)) in refined.trace.iter().enumerate() {
            writeln!(err, "{iter}, {f}, {}, {}, {}", q.r, q.omega, q.phi)?;
        }
    }
    let mut v = estimate_json(&est);
    v["objective"] = json!(refined.value);
    v["outer_iterations"] = json!(refined.outer_iterations);
    print_json(&v)
}

fn omp(
    common: &Common,
    snapshot: &Path,
    grid_r: Option<[f64; 2]>,
    around: Option<[f64; 3]>,
    window: Option<[f64; 2]>,
) -> CliResult<()> {
    let mut cfg = load_config(common)?;
    if let Some(r) = grid_r {
        cfg.omp.r_range = Some(r);
    }
    let centre = match (around, window) {
        (Some(a), Some(w)) => {
            cfg.omp.window = Some(OmpWindow {
                r_half_width: w[0],
                angle_half_width: w[1],
            });
            PolarPoint::new(a[0], a[1], a[2])
        }
        _ => {
            cfg.omp.window = None;
            PolarPoint::new(1.0, 0.0, 0.0)
        }
    };
    let plan = cfg.plan()?;
    let snap = read_dump(snapshot)?;
    let grid = omp_grid(&cfg, &plan, &centre)?;
    let est = omp_estimate(&snap, &plan.geometry, &grid)?;
    let mut v = estimate_json(&est);
    v["grid_nodes"] = json!(grid.len());
    print_json(&v)
}

fn bounds(common: &Common, seed: u64, trials: usize, crb_only: bool, out: Option<&Path>) -> CliResult<()> {
    let mut cfg = load_config(common)?;
    cfg.seed = seed;
    if trials == 0 {
        return Err(Failure::Config("trials must be at least 1".into()));
    }
    let plan = cfg.plan()?;
    let snr_db = cfg.snr_db[0];
    let sigma2 = nearfield::channel::noise_variance_for_snr_db(cfg.gain_magnitude, snr_db);
    let rows = par::with_workers(cfg.workers, || {
        par::map_range(trials, |t| -> nearfield::Result<_> {
            let draw = draw_trial(&cfg, t);
            let truth = TrueParam::new(draw.q.to_cartesian(), draw.gain)?;
            let (crb, mcrb) = if crb_only {
                (crb_position(&fim(&plan.geometry, &truth, sigma2)?)?, None)
            } else {
                let b = bound_report(&truth, &plan, sigma2)?;
                (b.crb_pos, Some(b.mcrb_pos))
            };
            Ok((draw, crb, mcrb))
        })
    });
    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    let csv_err = |e: csv::Error| Failure::Other(e.to_string());
    w.write_record(["seed", "r", "omega", "phi", "crb_pos", "mcrb_pos"]).map_err(csv_err)?;
    for row in rows {
        let (draw, crb, mcrb) = row?;
        w.write_record([
            draw.seed.to_string(),
            draw.q.r.to_string(),
            draw.q.omega.to_string(),
            draw.q.phi.to_string(),
            crb.to_string(),
            mcrb.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn check_failures(cfg: &ExperimentConfig, points: &[PointResult]) -> CliResult<()> {
    for p in points {
        let frac = p.failure_fraction();
        if frac > cfg.max_failure_fraction {
            return Err(Failure::Threshold(format!(
                "{}={}: {:.1}% of estimator calls failed (limit {:.1}%)",
                p.axis.label(),
                p.value,
                100.0 * frac,
                100.0 * cfg.max_failure_fraction
            )));
        }
    }
    Ok(())
}

fn run_sweep(
    common: &Common,
    seed: u64,
    trials: usize,
    out: &Path,
    axis: &str,
    values: Option<&[f64]>,
    no_runtime: bool,
) -> CliResult<()> {
    let mut cfg = load_config(common)?;
    cfg.seed = seed;
    cfg.trials = trials;
    cfg.record_runtime = !no_runtime;
    let axis = SweepAxis::parse(axis)?;
    if axis == SweepAxis::Snr {
        if let Some(v) = values {
            cfg.snr_db = v.to_vec();
        }
    }
    cfg.validate()?;
    let started = SystemTime::now();
    let clock = Instant::now();
    let points = match (axis, values) {
        (SweepAxis::Snr, _) => run_experiment(&cfg)?,
        (_, Some(v)) => sweep(&cfg, axis, v)?,
        (_, None) => return Err(Failure::Config(format!("--values is required for the {} axis", axis.label()))),
    };
    let written = write_outputs(out, &cfg, &points, started, clock.elapsed().as_secs_f64())?;
    for p in &points {
        for s in &p.summary {
            eprintln!(
                "{}={} {}: rmse {} ({} ok, {} flagged)",
                s.sweep_axis,
                s.sweep_value,
                s.method,
                s.rmse_m.map_or("-".into(), |v| format!("{v:.4}")),
                s.trials_ok,
                s.trials_flagged
            );
        }
    }
    for path in written {
        println!("{}", path.display());
    }
    check_failures(&cfg, &points)
}

fn report(summaries: &[String], out: Option<&Path>) -> CliResult<()> {
    let mut labelled = Vec::new();
    for item in summaries {
        let (label, path) = item
            .split_once('=')
            .ok_or_else(|| Failure::Config(format!("expected LABEL=PATH, got {item:?}")))?;
        let file = File::open(path).map_err(|e| Failure::Other(format!("{path}: {e}")))?;
        labelled.push((label.to_string(), read_summary_csv(BufReader::new(file))?));
    }
    let md = render_markdown(&labelled);
    match out {
        Some(p) => std::fs::write(p, md)?,
        None => io::stdout().lock().write_all(md.as_bytes())?,
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate {
            common,
            seed,
            trial,
            out,
        } => simulate(&common, seed, trial, &out),
        Command::Aple {
            common,
            snapshot,
            verbose,
        } => aple(&common, &snapshot, verbose),
        Command::Eaple {
            common,
            snapshot,
            init,
            verbose,
        } => eaple(&common, &snapshot, init, verbose),
        Command::Omp {
            common,
            snapshot,
            grid_r,
            around,
            window,
        } => omp(&common, &snapshot, grid_r, around, window),
        Command::Bounds {
            common,
            seed,
            trials,
            crb_only,
            out,
        } => bounds(&common, seed, trials, crb_only, out.as_deref()),
        Command::Sweep {
            common,
            seed,
            trials,
            out,
            axis,
            values,
            no_runtime,
        } => run_sweep(&common, seed, trials, &out, &axis, values.as_deref(), no_runtime),
        Command::Report { summaries, out } => report(&summaries, out.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Threshold(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Other(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
