//! Small-signal stability toolkit for inverter-based AC systems with a
//! self-adaptive active damper (SAD).
//!
//! The crate covers the whole loop: frequency-domain dq modeling of the
//! grid branch, grid-following inverters and the damper; eigenvalue
//! trajectory stability assessment of the PCC nodal admittance; an averaged
//! time-domain simulator used for admittance scans, on-line grid impedance
//! estimation and as an independent stability oracle; a small MLP used as a
//! surrogate for the admittance and damper-parameter maps; and the
//! margin-constrained damper tuning built on top of all of that.

pub mod ann;
pub mod config;
pub mod dqcore;
mod error;
pub mod persist;
pub mod plants;
pub mod simtime;
pub mod stability;
pub mod tuner;
pub mod zest;

pub use error::{Error, Result};
pub use num_complex::Complex64;

/// Nominal grid angular frequency, 2π·50 rad/s.
pub const OMEGA_50HZ: f64 = 2.0 * std::f64::consts::PI * 50.0;
