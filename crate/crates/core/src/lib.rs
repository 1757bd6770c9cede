//! Behavioral simulator of a 4-bits/cell embedded-flash weight memory tightly
//! coupled to a near-memory computing unit, with an inference harness that
//! programs int8/4-bit models into the array and measures accuracy before and
//! after retention bake.

pub mod analog;
pub mod array;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod nmcu;
pub mod program;
pub mod selftest;
pub mod state;

pub use error::{Error, Result};
