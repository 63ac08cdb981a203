//! Boundary control of the Korteweg-de Vries equation on a bounded interval.
//!
//! The crate covers the discrete operator and θ-scheme solvers, fractional
//! Sobolev trace norms, the critical-length sets, HUM control synthesis
//! through observability Gramians, the Picard loop that steers the nonlinear
//! equation, and a small experiment runner with reproducible manifests.

pub mod discretization;
pub mod solvers;
pub mod sobolev;
pub mod critical;
pub mod control;
pub mod profiles;
pub mod verification;
pub mod steering;
pub mod experiment;
