//! Randomized sketch-and-project solvers for consistent linear systems, with
//! inexact inner solves and expected-rate certificates.

// Negated comparisons are deliberate: NaN must take the failure branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod certificate;
pub mod data;
pub mod dual;
pub mod error;
pub mod inner;
pub mod linalg;
pub mod primal;
pub mod rng;
pub mod sketch;
pub mod spectral;

pub use error::{Error, Result};
pub use linalg::{LinearSystemInstance, Metric};
pub use sketch::{Sketch, SketchDistribution, SketchSample};
