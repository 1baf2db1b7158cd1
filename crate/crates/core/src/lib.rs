//! Next-generation reservoir computing (nonlinear vector autoregression)
//! emulators for chaotic ODEs, and the machinery to show that a fitted
//! readout recovers the integration scheme that produced its training data.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod emulate;
pub mod error;
pub mod experiments;
pub mod features;
pub mod integrate;
pub mod io;
pub mod metrics;
pub mod readout;

pub use dynamics::{Flow, SystemSpec};
pub use error::{NvarError, Result};
pub use features::{FeatureIndex, FeatureSpec, Scaler};
pub use integrate::{Scheme, Trajectory, TrajectoryMeta};
pub use readout::{FitFailure, FitOptions, Readout};
