//! Shared test code: brute-force loop versions of the model's formulas and
//! the check suites run both by this crate's tests and by the acceptance
//! target.

#![allow(dead_code)]

pub mod gradient_suite;
pub mod experiments;
pub mod loops;
pub mod oracle_suite;

pub use loops::*;
