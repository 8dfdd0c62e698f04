//! Near-field localization of a single-antenna user by a large planar array.
//!
//! The crate covers the whole simulation chain:
//!
//! * [`geometry`] and [`channel`]: array lattice, subarray partition, exact
//!   spherical-wave and per-subarray plane-wave steering vectors, seeded
//!   snapshot synthesis.
//! * [`vonmises`], [`aoa`], [`fusion`], [`aple`]: the partitioned message
//!   passing estimator. Each subarray produces Von Mises beliefs over its
//!   direction cosines; the fusion step turns them into a Gaussian location
//!   belief and sends refreshed priors back.
//! * [`eaple`]: maximum-likelihood refinement by block coordinate ascent in
//!   polar coordinates.
//! * [`bounds`]: Cramér-Rao bound of the exact model and the misspecified
//!   bound of the subarray plane-wave model.
//! * [`omp`]: single-atom polar-grid matched-correlation baseline.
//! * [`harness`]: Monte Carlo experiments, sweeps and CSV/markdown reports.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aoa;
pub mod aple;
pub mod bounds;
pub mod channel;
pub mod eaple;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod harness;
pub mod omp;
pub mod par;
pub mod vonmises;

pub use aoa::{AoaPosterior, SubarrayShape};
pub use aple::{run_aple, ApleConfig, LocationEstimate};
pub use bounds::{BoundReport, MisParam, TrueParam};
pub use channel::{ComplexGain, Snapshot, C64};
pub use eaple::{bca_refine, EapleConfig};
pub use error::{Error, Result};
pub use geometry::{ArrayGeometry, PartitionPlan, PolarPoint, UeLocation, Vec3};
pub use omp::{omp_estimate, PolarGrid};
pub use vonmises::{GaussianBelief3, VonMisesMessage};
