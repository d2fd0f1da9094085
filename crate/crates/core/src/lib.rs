//! Optimal learning-rate schedules that balance task performance against the
//! effort cost of learning.

pub mod container;
pub mod controllers;
pub mod dynamics;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod idx;
pub mod metalearn;
pub mod metaopt;
pub mod model;
pub mod reward;
pub mod tasks;

pub use error::{Error, Result};
