//! Independent reference checks shared by the core tests and the acceptance
//! target.

#![allow(dead_code, clippy::needless_range_loop)]

pub mod gradient;
pub mod metrics;
