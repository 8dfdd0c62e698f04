//! Line-of-sight channel synthesis and steering vectors.
//!
//! Sign convention: every element carries `e^{-j 2π r / λ}` for a path
//! length `r`. The far-field subarray vector is its first-order expansion
//! about the subarray center, which yields the positive linear phase ramp
//! `e^{+j 2π (k̃ d_x θ_x + l̃ d_y θ_y) / λ}` with `θ` the direction cosines
//! of `p_U − p_BS,m`.

use std::f64::consts::PI;
use std::io::{Read, Write};

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::geometry::{wrap_pi, ArrayGeometry, PartitionPlan, UeLocation, Vec3};

pub type C64 = Complex64;

/// Equivalent complex channel gain `α = β s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexGain(pub C64);

impl ComplexGain {
    pub fn from_polar(magnitude: f64, phase: f64) -> Self {
        Self(C64::from_polar(magnitude, phase))
    }

    pub fn magnitude(&self) -> f64 {
        self.0.norm()
    }

    /// Phase in `[-π, π)`.
    pub fn phase(&self) -> f64 {
        wrap_pi(self.0.arg())
    }

    /// Gain seen at a subarray whose center is `r_m` from the UE:
    /// `α e^{-j 2π r_m / λ}`.
    pub fn at_subarray(&self, r_m: f64, wavelength: f64) -> Self {
        Self(self.0 * C64::from_polar(1.0, -2.0 * PI * r_m / wavelength))
    }
}

/// Ground truth attached to a synthesized snapshot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnapshotTruth {
    pub location: UeLocation,
    pub gain: ComplexGain,
    pub seed: u64,
}

/// One received snapshot `y = α a(p_U) + n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub y: Vec<C64>,
    pub noise_variance: f64,
    pub truth: Option<SnapshotTruth>,
}

impl Snapshot {
    pub fn new(y: Vec<C64>, noise_variance: f64) -> Result<Self> {
        if !(noise_variance.is_finite() && noise_variance > 0.0) {
            return Err(domain(format!("noise variance must be positive, got {noise_variance}")));
        }
        Ok(Self {
            y,
            noise_variance,
            truth: None,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub(crate) fn check_len(&self, geom: &ArrayGeometry) -> Result<()> {
        if self.y.len() != geom.n_antennas() {
            return Err(domain(format!(
                "snapshot has {} samples, geometry has {} antennas",
                self.y.len(),
                geom.n_antennas()
            )));
        }
        Ok(())
    }
}

/// Exact spherical-wave steering vector over the whole array.
pub fn nearfield_steering(geom: &ArrayGeometry, p: &Vec3) -> Result<Vec<C64>> {
    let k = 2.0 * PI / geom.wavelength;
    geom.positions()
        .iter()
        .map(|b| {
            let r = (b - p).norm();
            if r <= f64::EPSILON * (1.0 + p.norm()) {
                Err(domain(format!("point {p:?} coincides with an antenna")))
            } else {
                Ok(C64::from_polar(1.0, -k * r))
            }
        })
        .collect()
}

/// Plane-wave steering vector of an `n_mx × n_my` subarray, `a_x ⊗ a_y`,
/// centred on the subarray reference point.
pub fn farfield_steering(
    n_mx: usize,
    n_my: usize,
    d_x: f64,
    d_y: f64,
    wavelength: f64,
    theta_x: f64,
    theta_y: f64,
) -> Result<Vec<C64>> {
    if theta_x.abs() > 1.0 || theta_y.abs() > 1.0 || !theta_x.is_finite() || !theta_y.is_finite() {
        return Err(domain(format!(
            "direction cosines must lie in [-1, 1], got ({theta_x}, {theta_y})"
        )));
    }
    let ax = linear_phase(n_mx, 2.0 * PI * d_x / wavelength * theta_x);
    let ay = linear_phase(n_my, 2.0 * PI * d_y / wavelength * theta_y);
    let mut out = Vec::with_capacity(n_mx * n_my);
    for a in &ax {
        for b in &ay {
            out.push(a * b);
        }
    }
    Ok(out)
}

/// `[e^{j ω k̃}]` with the symmetric index `k̃ = k − (n − 1)/2`, `k = 0..n`.
pub(crate) fn linear_phase(n: usize, omega: f64) -> Vec<C64> {
    let c = (n as f64 - 1.0) / 2.0;
    (0..n)
        .map(|k| C64::from_polar(1.0, omega * (k as f64 - c)))
        .collect()
}

/// SNR `|α|² / σ²` (linear).
pub fn snr(alpha: C64, noise_variance: f64) -> f64 {
    alpha.norm_sqr() / noise_variance
}

/// Noise variance that puts a gain of magnitude `alpha_mag` at `snr_db`.
pub fn noise_variance_for_snr_db(alpha_mag: f64, snr_db: f64) -> f64 {
    alpha_mag * alpha_mag * 10f64.powf(-snr_db / 10.0)
}

/// Synthesizes `y = α a(p_U) + n`, `n ~ CN(0, σ² I)`, from a seeded stream.
pub fn synthesize_snapshot(
    geom: &ArrayGeometry,
    location: &UeLocation,
    gain: ComplexGain,
    noise_variance: f64,
    seed: u64,
) -> Result<Snapshot> {
    let mut snap = synthesize_noiseless(geom, location, gain, noise_variance)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = (noise_variance / 2.0).sqrt();
    for v in snap.y.iter_mut() {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        *v += C64::new(s * re, s * im);
    }
    if let Some(t) = snap.truth.as_mut() {
        t.seed = seed;
    }
    Ok(snap)
}

/// `y = α a(p_U)` with no noise added. `noise_variance` is still recorded
/// because estimators scale their objectives by it.
pub fn synthesize_noiseless(
    geom: &ArrayGeometry,
    location: &UeLocation,
    gain: ComplexGain,
    noise_variance: f64,
) -> Result<Snapshot> {
    let a = nearfield_steering(geom, &location.cartesian)?;
    let mut snap = Snapshot::new(a.into_iter().map(|v| v * gain.0).collect(), noise_variance)?;
    snap.truth = Some(SnapshotTruth {
        location: *location,
        gain,
        seed: 0,
    });
    Ok(snap)
}

/// Samples of subarray `m` (0-based) in local `(k, l)` row-major order.
pub fn subarray_view(snapshot: &Snapshot, plan: &PartitionPlan, m: usize) -> Result<Vec<C64>> {
    snapshot.check_len(&plan.geometry)?;
    Ok(plan
        .member_indices(m)?
        .into_iter()
        .map(|t| snapshot.y[t])
        .collect())
}

/// Inverse of gathering every [`subarray_view`]: scatters the concatenated
/// views back to flat array order.
pub fn scatter_views(views: &[Vec<C64>], plan: &PartitionPlan) -> Result<Vec<C64>> {
    if views.len() != plan.n_subarrays() {
        return Err(domain(format!(
            "expected {} subarray views, got {}",
            plan.n_subarrays(),
            views.len()
        )));
    }
    let mut y = vec![C64::new(0.0, 0.0); plan.geometry.n_antennas()];
    for (m, view) in views.iter().enumerate() {
        let idx = plan.member_indices(m)?;
        if view.len() != idx.len() {
            return Err(domain(format!("subarray {m} view has wrong length {}", view.len())));
        }
        for (t, v) in idx.into_iter().zip(view) {
            y[t] = *v;
        }
    }
    Ok(y)
}

/// Derives an independent per-trial seed from a master seed (SplitMix64
/// finalizer over the pair).
pub fn trial_seed(master: u64, trial: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(master ^ mix(trial))
}

/// Writes the binary snapshot dump: `N_B` as little-endian `u64`, `σ²` as
/// little-endian `f64`, then interleaved real/imaginary `f64` samples.
pub fn write_snapshot<W: Write>(mut w: W, snapshot: &Snapshot) -> Result<()> {
    w.write_all(&(snapshot.y.len() as u64).to_le_bytes())?;
    w.write_all(&snapshot.noise_variance.to_le_bytes())?;
    for v in &snapshot.y {
        w.write_all(&v.re.to_le_bytes())?;
        w.write_all(&v.im.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a dump written by [`write_snapshot`]. Ground truth is not stored.
pub fn read_snapshot<R: Read>(mut r: R) -> Result<Snapshot> {
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let n = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b8)?;
    let noise_variance = f64::from_le_bytes(b8);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b8)?;
        let re = f64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let im = f64::from_le_bytes(b8);
        y.push(C64::new(re, im));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Domain(format!("{} trailing bytes after snapshot", rest.len())));
    }
    Snapshot::new(y, noise_variance)
}
