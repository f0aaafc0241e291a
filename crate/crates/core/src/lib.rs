//! Membership inference testing: audited models, auxiliary auditing data
//! extraction, MINT detectors, the experimental protocol and its metrics.

mod codec;
pub mod aad;
pub mod audited;
pub mod container;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod metrics;
pub mod protocol;
pub mod synth;

pub use error::{Error, Result};
