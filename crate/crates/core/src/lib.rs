//! Estimation and inference for sharp regression discontinuity designs with
//! a discrete running variable.

// `!(x > 0.0)` rejects NaN along with nonpositive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asymptotics;
pub mod basis;
pub mod data;
pub mod dist;
pub mod error;
pub mod honest;
pub mod linalg;
pub mod methods;
pub mod montecarlo;
pub mod rng;
pub mod smoothness;
pub mod variance;

pub use basis::{fit, Design, FitResult};
pub use data::{load_csv, GroupedSample, Observation, Sample};
pub use error::{RdError, Result};
