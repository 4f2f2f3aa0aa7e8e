//! Conventional and structure-exploiting ADMM for linear MPC, with penalty
//! tuning, structure metrics and an operation-count cost model.

pub mod bench;
pub mod cost;
pub mod error;
pub mod gen;
pub mod linalg;
pub mod ops;
pub mod problem;
pub mod solver;
pub mod structure;
pub mod tuning;

pub use error::{Error, Result};
