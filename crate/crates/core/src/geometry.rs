//! Planar array lattice, subarray partition and near/far-field boundaries.
//!
//! The array lies in the `z = 0` plane, centred on the origin, with antenna
//! `(i, j)` (1-based, `i` along x) at
//! `[(i - (N_x + 1)/2) d_x, (j - (N_y + 1)/2) d_y, 0]`. Flat element order is
//! row-major over `(i, j)`: `t = (i - 1) N_y + j`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Result};

pub type Vec3 = nalgebra::Vector3<f64>;

/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT: f64 = 2.997_924_58e8;

/// Uniform planar array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub n_x: usize,
    pub n_y: usize,
    /// Antenna spacing along x (m).
    pub d_x: f64,
    /// Antenna spacing along y (m).
    pub d_y: f64,
    /// Carrier wavelength (m).
    pub wavelength: f64,
}

/// Fresnel (reactive near-field) and Fraunhofer distances of an aperture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionBoundaries {
    pub fresnel: f64,
    pub fraunhofer: f64,
}

impl RegionBoundaries {
    /// Boundaries of an aperture with largest dimension `d` at wavelength `lambda`.
    pub fn for_aperture(d: f64, lambda: f64) -> Self {
        Self {
            fresnel: (d.powi(4) / (8.0 * lambda)).cbrt(),
            fraunhofer: 2.0 * d * d / lambda,
        }
    }
}

impl ArrayGeometry {
    pub fn new(n_x: usize, n_y: usize, d_x: f64, d_y: f64, wavelength: f64) -> Result<Self> {
        let g = Self {
            n_x,
            n_y,
            d_x,
            d_y,
            wavelength,
        };
        g.validate()?;
        Ok(g)
    }

    /// Square `n × n` array with spacing `d`.
    pub fn square(n: usize, d: f64, wavelength: f64) -> Result<Self> {
        Self::new(n, n, d, d, wavelength)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_x == 0 || self.n_y == 0 {
            return Err(config("antenna counts must be positive"));
        }
        for (name, v) in [
            ("d_x", self.d_x),
            ("d_y", self.d_y),
            ("wavelength", self.wavelength),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(config(format!("{name} must be finite and positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Total number of antennas `N_B`.
    pub fn n_antennas(&self) -> usize {
        self.n_x * self.n_y
    }

    pub fn size_x(&self) -> f64 {
        self.n_x as f64 * self.d_x
    }

    pub fn size_y(&self) -> f64 {
        self.n_y as f64 * self.d_y
    }

    /// Largest dimension `D = (L_x² + L_y²)^{1/2}`.
    pub fn largest_dimension(&self) -> f64 {
        self.size_x().hypot(self.size_y())
    }

    pub fn region_boundaries(&self) -> RegionBoundaries {
        RegionBoundaries::for_aperture(self.largest_dimension(), self.wavelength)
    }

    /// Position of antenna `(i, j)`, both 1-based.
    pub fn antenna_position(&self, i: usize, j: usize) -> Result<Vec3> {
        self.check_index(i, j)?;
        Ok(self.position_unchecked(i - 1, j - 1))
    }

    /// 1-based flat element index `(i - 1) N_y + j`.
    pub fn flat_index(&self, i: usize, j: usize) -> Result<usize> {
        self.check_index(i, j)?;
        Ok((i - 1) * self.n_y + j)
    }

    /// Inverse of [`flat_index`](Self::flat_index).
    pub fn lattice_index(&self, t: usize) -> Result<(usize, usize)> {
        if t == 0 || t > self.n_antennas() {
            return Err(domain(format!("flat index {t} outside 1..={}", self.n_antennas())));
        }
        Ok(((t - 1) / self.n_y + 1, (t - 1) % self.n_y + 1))
    }

    /// All antenna positions in flat element order.
    pub fn positions(&self) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(self.n_antennas());
        for i in 0..self.n_x {
            for j in 0..self.n_y {
                out.push(self.position_unchecked(i, j));
            }
        }
        out
    }

    // 0-based lattice coordinates.
    pub(crate) fn position_unchecked(&self, i0: usize, j0: usize) -> Vec3 {
        Vec3::new(
            (i0 as f64 - (self.n_x as f64 - 1.0) / 2.0) * self.d_x,
            (j0 as f64 - (self.n_y as f64 - 1.0) / 2.0) * self.d_y,
            0.0,
        )
    }

    fn check_index(&self, i: usize, j: usize) -> Result<()> {
        if i == 0 || i > self.n_x || j == 0 || j > self.n_y {
            return Err(domain(format!(
                "antenna index ({i}, {j}) outside 1..={} x 1..={}",
                self.n_x, self.n_y
            )));
        }
        Ok(())
    }
}

/// Regular `m_x × m_y` grid of equal contiguous subarrays, numbered row-major
/// (subarray `m = b_x m_y + b_y`, 0-based).
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub geometry: ArrayGeometry,
    pub m_x: usize,
    pub m_y: usize,
    /// Antennas per subarray along x.
    pub sub_nx: usize,
    /// Antennas per subarray along y.
    pub sub_ny: usize,
    centers: Vec<Vec3>,
}

impl PartitionPlan {
    pub fn new(geometry: ArrayGeometry, m_x: usize, m_y: usize) -> Result<Self> {
        geometry.validate()?;
        if m_x == 0 || m_y == 0 {
            return Err(config("subarray grid counts must be positive"));
        }
        if !geometry.n_x.is_multiple_of(m_x) || !geometry.n_y.is_multiple_of(m_y) {
            return Err(config(format!(
                "{}x{} array cannot be split into {m_x}x{m_y} equal subarrays",
                geometry.n_x, geometry.n_y
            )));
        }
        let sub_nx = geometry.n_x / m_x;
        let sub_ny = geometry.n_y / m_y;
        let mut centers = Vec::with_capacity(m_x * m_y);
        for bx in 0..m_x {
            for by in 0..m_y {
                // Mean of member positions: the lattice is affine in (i, j).
                let ci = bx as f64 * sub_nx as f64 + (sub_nx as f64 - 1.0) / 2.0;
                let cj = by as f64 * sub_ny as f64 + (sub_ny as f64 - 1.0) / 2.0;
                centers.push(Vec3::new(
                    (ci - (geometry.n_x as f64 - 1.0) / 2.0) * geometry.d_x,
                    (cj - (geometry.n_y as f64 - 1.0) / 2.0) * geometry.d_y,
                    0.0,
                ));
            }
        }
        Ok(Self {
            geometry,
            m_x,
            m_y,
            sub_nx,
            sub_ny,
            centers,
        })
    }

    /// Number of subarrays `M`.
    pub fn n_subarrays(&self) -> usize {
        self.m_x * self.m_y
    }

    /// Antennas per subarray `N_m`.
    pub fn sub_size(&self) -> usize {
        self.sub_nx * self.sub_ny
    }

    pub fn centers(&self) -> &[Vec3] {
        &self.centers
    }

    pub fn center(&self, m: usize) -> Vec3 {
        self.centers[m]
    }

    /// 0-based flat array indices of subarray `m`, in local `(k, l)`
    /// row-major order.
    pub fn member_indices(&self, m: usize) -> Result<Vec<usize>> {
        if m >= self.n_subarrays() {
            return Err(domain(format!("subarray {m} outside 0..{}", self.n_subarrays())));
        }
        let (bx, by) = (m / self.m_y, m % self.m_y);
        let n_y = self.geometry.n_y;
        let mut out = Vec::with_capacity(self.sub_size());
        for k in 0..self.sub_nx {
            let i0 = bx * self.sub_nx + k;
            for l in 0..self.sub_ny {
                out.push(i0 * n_y + by * self.sub_ny + l);
            }
        }
        Ok(out)
    }

    /// Boundaries of one subarray's aperture.
    pub fn subarray_boundaries(&self) -> RegionBoundaries {
        let g = &self.geometry;
        let d = (self.sub_nx as f64 * g.d_x).hypot(self.sub_ny as f64 * g.d_y);
        RegionBoundaries::for_aperture(d, g.wavelength)
    }

    /// Subarray far-field test: `R_{m,FH} < ‖p − p_BS,m‖` for each subarray.
    pub fn sfa_check(&self, p: &Vec3) -> Vec<bool> {
        let fh = self.subarray_boundaries().fraunhofer;
        self.centers.iter().map(|c| (p - c).norm() > fh).collect()
    }
}

/// UE position in front of the array (`z > 0`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UeLocation {
    pub cartesian: Vec3,
}

impl UeLocation {
    pub fn new(cartesian: Vec3) -> Result<Self> {
        if !cartesian.iter().all(|v| v.is_finite()) {
            return Err(domain("UE position must be finite"));
        }
        if cartesian.z <= 0.0 {
            return Err(domain(format!("UE must be in front of the array (z > 0), got z = {}", cartesian.z)));
        }
        Ok(Self { cartesian })
    }

    pub fn from_polar(q: PolarPoint) -> Result<Self> {
        Self::new(q.to_cartesian())
    }

    pub fn polar(&self) -> PolarPoint {
        PolarPoint::from_cartesian(&self.cartesian)
    }

    pub fn range(&self) -> f64 {
        self.cartesian.norm()
    }
}

/// Spherical coordinates `p = r [cos ω sin φ, sin ω sin φ, cos φ]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarPoint {
    pub r: f64,
    /// Azimuth in `[0, 2π)`.
    pub omega: f64,
    /// Polar angle from the array normal.
    pub phi: f64,
}

impl PolarPoint {
    pub fn new(r: f64, omega: f64, phi: f64) -> Self {
        Self { r, omega, phi }
    }

    pub fn to_cartesian(&self) -> Vec3 {
        let (so, co) = self.omega.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        Vec3::new(self.r * co * sp, self.r * so * sp, self.r * cp)
    }

    pub fn from_cartesian(p: &Vec3) -> Self {
        let r = p.norm();
        let omega = wrap_two_pi(p.y.atan2(p.x));
        let phi = if r > 0.0 { (p.z / r).clamp(-1.0, 1.0).acos() } else { 0.0 };
        Self { r, omega, phi }
    }

    /// Jacobian `∂p/∂(r, ω, φ)` as columns.
    pub fn jacobian(&self) -> nalgebra::Matrix3<f64> {
        let (so, co) = self.omega.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        let r = self.r;
        nalgebra::Matrix3::from_columns(&[
            Vec3::new(co * sp, so * sp, cp),
            Vec3::new(-r * so * sp, r * co * sp, 0.0),
            Vec3::new(r * co * cp, r * so * cp, -r * sp),
        ])
    }
}

/// Wraps an angle to `[0, 2π)`.
pub fn wrap_two_pi(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    if w >= 2.0 * PI {
        0.0
    } else {
        w
    }
}

/// Wraps an angle to `[-π, π)`.
pub fn wrap_pi(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        -PI
    } else {
        w
    }
}
