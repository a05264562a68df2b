//! Null-space-based formation path following for fleets of underactuated
//! 6DOF underwater vehicles.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod error;
pub mod guidance;
pub mod lowlevel;
pub mod path;
pub mod reference;
pub mod rotations;
pub mod scenario;
pub mod simulator;
pub mod telemetry;
pub mod vehicle;

pub use error::{Error, Result};
