//! Experiment configuration (JSON document).

use std::f64::consts::{FRAC_PI_2, PI};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aple::ApleConfig;
use crate::eaple::EapleConfig;
use crate::error::{config, Result};
use crate::geometry::{ArrayGeometry, PartitionPlan, SPEED_OF_LIGHT};

/// Antenna spacing, either relative to the carrier wavelength or absolute.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    Wavelengths(f64),
    Meters(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryConfig {
    pub n_x: usize,
    pub n_y: usize,
    pub spacing: Spacing,
    pub frequency_hz: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            n_x: 60,
            n_y: 60,
            spacing: Spacing::Wavelengths(0.5),
            frequency_hz: 10e9,
        }
    }
}

impl GeometryConfig {
    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.frequency_hz
    }

    pub fn build(&self) -> Result<ArrayGeometry> {
        if !(self.frequency_hz > 0.0 && self.frequency_hz.is_finite()) {
            return Err(config(format!("carrier frequency must be positive, got {}", self.frequency_hz)));
        }
        let lambda = self.wavelength();
        let d = match self.spacing {
            Spacing::Wavelengths(w) => w * lambda,
            Spacing::Meters(m) => m,
        };
        ArrayGeometry::new(self.n_x, self.n_y, d, d, lambda)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub m_x: usize,
    pub m_y: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self { m_x: 2, m_y: 2 }
    }
}

/// A scalar that is either fixed or drawn uniformly from `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Sampled {
    Fixed(f64),
    Uniform([f64; 2]),
}

impl Sampled {
    pub fn draw<R: rand::Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            Sampled::Fixed(v) => v,
            Sampled::Uniform([lo, hi]) if hi > lo => rng.random_range(lo..hi),
            Sampled::Uniform([lo, _]) => lo,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let ok = match *self {
            Sampled::Fixed(v) => v.is_finite(),
            Sampled::Uniform([lo, hi]) => lo.is_finite() && hi.is_finite() && hi >= lo,
        };
        if ok {
            Ok(())
        } else {
            Err(config(format!("invalid {name} distribution {self:?}")))
        }
    }

    fn lower(&self) -> f64 {
        match *self {
            Sampled::Fixed(v) => v,
            Sampled::Uniform([lo, _]) => lo,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Aple,
    /// APLE followed by the likelihood refinement.
    Eaple,
    /// Likelihood refinement from a random start.
    EapleRandom,
    Omp,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Aple => "aple",
            Method::Eaple => "eaple",
            Method::EapleRandom => "eaple_random",
            Method::Omp => "omp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "aple" => Ok(Method::Aple),
            "eaple" => Ok(Method::Eaple),
            "eaple_random" => Ok(Method::EapleRandom),
            "omp" => Ok(Method::Omp),
            _ => Err(config(format!("unknown method {s:?}"))),
        }
    }
}

/// Search window around the true location, snapped to the global lattice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OmpWindow {
    pub r_half_width: f64,
    pub angle_half_width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OmpSettings {
    /// Range bracket; defaults to `[max(R_FS, 0.5 m), 1.5 R_FH]`.
    pub r_range: Option<[f64; 2]>,
    pub r_step: f64,
    pub angle_step: f64,
    /// Restricts the scan to a neighbourhood of the truth. Only the grid
    /// extent changes; nodes stay on the lattice of the full grid.
    pub window: Option<OmpWindow>,
}

impl Default for OmpSettings {
    fn default() -> Self {
        Self {
            r_range: None,
            r_step: crate::omp::RANGE_STEP,
            angle_step: crate::omp::ANGLE_STEP,
            window: None,
        }
    }
}

/// Start distribution for [`Method::EapleRandom`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomInit {
    pub r: Sampled,
    pub omega: Sampled,
    pub phi: Sampled,
}

impl Default for RandomInit {
    fn default() -> Self {
        Self {
            r: Sampled::Uniform([9.0, 11.0]),
            omega: Sampled::Uniform([0.0, 2.0 * PI]),
            phi: Sampled::Uniform([0.0, FRAC_PI_2]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundSelection {
    pub crb: bool,
    pub mcrb: bool,
}

impl Default for BoundSelection {
    fn default() -> Self {
        Self { crb: true, mcrb: true }
    }
}

/// Per-angle RMSE bin counts over `ω ∈ [0, 2π)` and `φ ∈ [0, π/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AngleBins {
    pub omega: usize,
    pub phi: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub geometry: GeometryConfig,
    pub partition: PartitionConfig,
    pub r: Sampled,
    pub omega: Sampled,
    pub phi: Sampled,
    pub gain_magnitude: f64,
    pub snr_db: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub aple: ApleConfig,
    pub eaple: EapleConfig,
    pub omp: OmpSettings,
    pub random_init: RandomInit,
    pub bounds: BoundSelection,
    pub angle_bins: Option<AngleBins>,
    /// Thread count for trial-level parallelism; `None` uses all cores.
    pub workers: Option<usize>,
    /// Wall-clock timing per estimator call. Disable for byte-identical output.
    pub record_runtime: bool,
    /// Largest tolerated fraction of failed estimator calls.
    pub max_failure_fraction: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            geometry: GeometryConfig::default(),
            partition: PartitionConfig::default(),
            r: Sampled::Fixed(20.0),
            omega: Sampled::Uniform([0.0, 2.0 * PI]),
            phi: Sampled::Uniform([0.0, FRAC_PI_2]),
            gain_magnitude: 1.0,
            snr_db: vec![20.0],
            trials: 200,
            seed: 0,
            methods: vec![Method::Aple, Method::Eaple],
            aple: ApleConfig::default(),
            eaple: EapleConfig::default(),
            omp: OmpSettings::default(),
            random_init: RandomInit::default(),
            bounds: BoundSelection::default(),
            angle_bins: None,
            workers: None,
            record_runtime: true,
            max_failure_fraction: 0.1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn plan(&self) -> Result<PartitionPlan> {
        PartitionPlan::new(self.geometry.build()?, self.partition.m_x, self.partition.m_y)
    }

    pub fn validate(&self) -> Result<()> {
        self.plan()?;
        if self.trials == 0 {
            return Err(config("trials must be at least 1"));
        }
        if self.snr_db.is_empty() || self.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(config("snr_db must be a nonempty list of finite values"));
        }
        if self.methods.is_empty() {
            return Err(config("no estimators selected"));
        }
        if !(self.gain_magnitude > 0.0 && self.gain_magnitude.is_finite()) {
            return Err(config("gain_magnitude must be positive"));
        }
        for (name, s) in [("r", &self.r), ("omega", &self.omega), ("phi", &self.phi)] {
            s.validate(name)?;
        }
        if self.r.lower() <= 0.0 {
            return Err(config("UE range must be positive"));
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            return Err(config("max_failure_fraction must lie in [0, 1]"));
        }
        if self.workers == Some(0) {
            return Err(config("workers must be at least 1"));
        }
        if let Some(b) = self.angle_bins {
            if b.omega == 0 || b.phi == 0 {
                return Err(config("angle bin counts must be positive"));
            }
        }
        if !(self.omp.r_step > 0.0 && self.omp.angle_step > 0.0) {
            return Err(config("OMP grid steps must be positive"));
        }
        self.aple.validate()?;
        self.eaple.validate()?;
        Ok(())
    }
}
