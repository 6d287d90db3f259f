//! Online safe switching for switched LQR systems with unknown dynamics.
//!
//! The library covers the full pipeline for controlling an externally forced
//! switched linear system whose mode matrices are not known in advance:
//!
//! - [`plant`]: ground-truth switched plant simulator with sub-Gaussian
//!   process noise and an externally revealed switch sequence.
//! - [`knownlqr`]: known-parameter machinery, from Riccati solutions and
//!   exact LQR SDPs through Lyapunov costs, fixed-policy and Riccati-based
//!   minimum dwell times, and baseline-cost calculators.
//! - [`sdp`]: a small residual-certified semidefinite-program solver for
//!   the dense LQR-shaped programs used throughout.
//! - [`sysid`]: online regularized least squares with high-probability
//!   confidence ellipsoids per mode.
//! - [`ofu`]: optimistic controller synthesis from confidence ellipsoids
//!   via inflated primal/dual SDPs, with stability certificates and the
//!   online dwell-time estimator.
//! - [`online`]: the end-to-end loop of warm-up exploration, the
//!   epoch-by-epoch switching run, state-norm monitors, and regret
//!   accounting against the known-parameter reference strategy.

pub mod knownlqr;
pub mod linalg;
pub mod ofu;
pub mod online;
pub mod plant;
pub mod sdp;
pub mod sysid;
