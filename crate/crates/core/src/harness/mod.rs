//! Monte Carlo experiment harness: configuration, execution, aggregation and
//! export.

pub mod config;
pub mod experiment;
pub mod report;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;

pub use config::{ExperimentConfig, Method, Sampled};
pub use experiment::{
    angle_binned_rmse, draw_trial, omp_grid, refine_from, run_eaple, run_experiment, summarize, sweep,
    sweep_point_config, trial_snapshot, PointResult, RmseSummary, SweepAxis, TrialDraw, TrialRecord,
};

use crate::error::Result;

#[derive(Serialize)]
struct Metadata<'a> {
    config: &'a ExperimentConfig,
    axis: &'a str,
    started_unix_s: u64,
    elapsed_s: f64,
    parallel: bool,
    failure_fraction: Vec<(f64, f64)>,
}

/// Writes `summary.csv`, one `trials_<axis>_<value>.csv` per sweep point and
/// `metadata.json` (the only file carrying wall-clock timestamps) into `dir`.
/// Per-trial files are written before the summary.
pub fn write_outputs(
    dir: &Path,
    cfg: &ExperimentConfig,
    points: &[PointResult],
    started: std::time::SystemTime,
    elapsed_s: f64,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for p in points {
        let path = dir.join(format!("trials_{}_{}.csv", p.axis.label(), p.value));
        report::write_trials_csv(BufWriter::new(File::create(&path)?), &p.records)?;
        written.push(path);
    }
    let summary = dir.join("summary.csv");
    report::write_summary_csv(BufWriter::new(File::create(&summary)?), &report::summary_of(points))?;
    written.push(summary);
    if let Some(bins) = cfg.angle_bins {
        let path = dir.join("angle_bins.csv");
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&path)?));
        w.write_record(["sweep_value", "method", "omega_bin", "phi_bin", "rmse_m"])?;
        for p in points {
            for m in &cfg.methods {
                for (i, row) in angle_binned_rmse(&p.records, *m, bins).iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        let v = v.map(|v| v.to_string()).unwrap_or_default();
                        w.write_record([p.value.to_string(), m.label().into(), i.to_string(), j.to_string(), v])?;
                    }
                }
            }
        }
        w.flush()?;
        written.push(path);
    }
    let meta = Metadata {
        config: cfg,
        axis: points.first().map_or("snr_db", |p| p.axis.label()),
        started_unix_s: started
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        elapsed_s,
        parallel: crate::par::is_parallel(),
        failure_fraction: points.iter().map(|p| (p.value, p.failure_fraction())).collect(),
    };
    let path = dir.join("metadata.json");
    serde_json::to_writer_pretty(BufWriter::new(File::create(&path)?), &meta)?;
    written.push(path);
    Ok(written)
}
