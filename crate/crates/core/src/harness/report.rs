//! CSV and markdown export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::experiment::{PointResult, RmseSummary, TrialRecord};
use crate::error::Result;

/// Flat per-trial row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub trial: usize,
    pub seed: u64,
    pub snr_db: f64,
    pub r: f64,
    pub omega: f64,
    pub phi: f64,
    pub method: String,
    pub x_hat: Option<f64>,
    pub y_hat: Option<f64>,
    pub z_hat: Option<f64>,
    pub err_m: Option<f64>,
    pub runtime_s: Option<f64>,
    pub flags: String,
}

pub const TRIAL_HEADER: [&str; 13] = [
    "trial", "seed", "snr_db", "r", "omega", "phi", "method", "x_hat", "y_hat", "z_hat", "err_m", "runtime_s", "flags",
];

pub const SUMMARY_HEADER: [&str; 9] = [
    "sweep_axis",
    "sweep_value",
    "method",
    "rmse_m",
    "trials_ok",
    "trials_flagged",
    "mean_runtime_s",
    "crb_m",
    "mcrb_m",
];

pub fn trial_rows(records: &[TrialRecord]) -> Vec<TrialRow> {
    records
        .iter()
        .flat_map(|rec| {
            rec.outcomes.iter().map(move |o| TrialRow {
                trial: rec.trial,
                seed: rec.seed,
                snr_db: rec.snr_db,
                r: rec.r,
                omega: rec.omega,
                phi: rec.phi,
                method: o.method.label().to_string(),
                x_hat: o.p_hat.map(|p| p.x),
                y_hat: o.p_hat.map(|p| p.y),
                z_hat: o.p_hat.map(|p| p.z),
                err_m: o.err_m,
                runtime_s: o.runtime_s,
                flags: o.flags.clone(),
            })
        })
        .collect()
}

fn write_rows<W: Write, T: Serialize>(w: W, header: &[&str], rows: &[T]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(header)?;
    for row in rows {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

fn read_rows<R: Read, T: for<'de> Deserialize<'de>>(r: R) -> Result<Vec<T>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(Into::into))
        .collect()
}

pub fn write_trials_csv<W: Write>(w: W, records: &[TrialRecord]) -> Result<()> {
    write_rows(w, &TRIAL_HEADER, &trial_rows(records))
}

pub fn read_trials_csv<R: Read>(r: R) -> Result<Vec<TrialRow>> {
    read_rows(r)
}

/// Writes the summary table; an empty slice yields the header alone.
pub fn write_summary_csv<W: Write>(w: W, rows: &[RmseSummary]) -> Result<()> {
    write_rows(w, &SUMMARY_HEADER, rows)
}

pub fn read_summary_csv<R: Read>(r: R) -> Result<Vec<RmseSummary>> {
    read_rows(r)
}

pub fn summary_of(points: &[PointResult]) -> Vec<RmseSummary> {
    points.iter().flat_map(|p| p.summary.iter().cloned()).collect()
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

type Column = (String, Box<dyn Fn(&RmseSummary) -> Option<f64>>);

fn value_label(v: f64) -> String {
    format!("{v}")
}

/// Markdown table with one row per summary file and one column per
/// `(method, sweep value)`; CRB and MCRB columns follow the methods.
///
/// `labelled` pairs a row label (for example the array size) with the rows
/// parsed from one summary CSV.
pub fn render_markdown(labelled: &[(String, Vec<RmseSummary>)]) -> String {
    let mut methods: Vec<String> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut axis = String::new();
    for (_, rows) in labelled {
        for row in rows {
            if !methods.contains(&row.method) {
                methods.push(row.method.clone());
            }
            if !values.contains(&row.sweep_value) {
                values.push(row.sweep_value);
            }
            axis.clone_from(&row.sweep_axis);
        }
    }
    let has = |f: fn(&RmseSummary) -> Option<f64>| labelled.iter().flat_map(|(_, r)| r).any(|r| f(r).is_some());
    let mut groups: Vec<Column> = Vec::new();
    for m in &methods {
        let m = m.clone();
        groups.push((m.to_uppercase(), Box::new(move |r: &RmseSummary| r.rmse_m)));
    }
    if has(|r| r.mcrb_m) {
        groups.push(("MCRB".into(), Box::new(|r: &RmseSummary| r.mcrb_m)));
    }
    if has(|r| r.crb_m) {
        groups.push(("CRB".into(), Box::new(|r: &RmseSummary| r.crb_m)));
    }

    let mut out = String::new();
    let mut header = String::from("| |");
    let mut rule = String::from("|---|");
    for (name, _) in &groups {
        for v in &values {
            let _ = write!(header, " {name} {axis}={} |", value_label(*v));
            rule.push_str("---|");
        }
    }
    let _ = writeln!(out, "{header}");
    let _ = writeln!(out, "{rule}");
    for (label, rows) in labelled {
        let mut by_key: BTreeMap<(String, u64), &RmseSummary> = BTreeMap::new();
        for r in rows {
            by_key.insert((r.method.clone(), r.sweep_value.to_bits()), r);
        }
        let _ = write!(out, "| {label} |");
        for (k, (_, get)) in groups.iter().enumerate() {
            for v in &values {
                let found = if k < methods.len() {
                    by_key.get(&(methods[k].clone(), v.to_bits())).and_then(|r| get(r))
                } else {
                    rows.iter().find(|r| r.sweep_value == *v).and_then(get)
                };
                let _ = write!(out, " {} |", cell(found));
            }
        }
        out.push('\n');
    }
    out
}

/// Parses the numeric cells back out of [`render_markdown`] output, row by
/// row. Missing cells are `None`.
pub fn parse_markdown_cells(md: &str) -> Vec<(String, Vec<Option<f64>>)> {
    md.lines()
        .skip(2)
        .filter(|l| l.starts_with('|'))
        .map(|l| {
            let cells: Vec<&str> = l.trim_matches('|').split('|').map(str::trim).collect();
            (
                cells[0].to_string(),
                cells[1..].iter().map(|c| c.parse::<f64>().ok()).collect(),
            )
        })
        .collect()
}
