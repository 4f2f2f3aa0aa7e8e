//! Scalar operation tallies.
//!
//! Every numerical kernel used inside an ADMM iteration reports the scalar
//! additions and multiplications it performs through a [`Tally`]. The solver
//! loop runs with [`NoTally`], which compiles away; the cost model runs the
//! very same kernels with [`OpCount`] to obtain instrumented counts.
//!
//! Conventions: comparisons count as additions, divisions as
//! multiplications, multiplication by an exact `±1` coefficient is free
//! (only its addition is counted), memory moves and permutations are free.

use serde::{Deserialize, Serialize};
use std::ops::{Add, AddAssign};

pub trait Tally {
    fn add(&mut self, adds: u64, muls: u64);
}

/// Discards all counts.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoTally;

impl Tally for NoTally {
    #[inline(always)]
    fn add(&mut self, _adds: u64, _muls: u64) {}
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCount {
    pub adds: u64,
    pub muls: u64,
}

impl OpCount {
    pub const ZERO: OpCount = OpCount { adds: 0, muls: 0 };

    pub fn new(adds: u64, muls: u64) -> Self {
        OpCount { adds, muls }
    }

    pub fn total(&self) -> u64 {
        self.adds + self.muls
    }
}

impl Tally for OpCount {
    #[inline(always)]
    fn add(&mut self, adds: u64, muls: u64) {
        self.adds += adds;
        self.muls += muls;
    }
}

impl Add for OpCount {
    type Output = OpCount;
    fn add(self, rhs: OpCount) -> OpCount {
        OpCount::new(self.adds + rhs.adds, self.muls + rhs.muls)
    }
}

impl AddAssign for OpCount {
    fn add_assign(&mut self, rhs: OpCount) {
        self.adds += rhs.adds;
        self.muls += rhs.muls;
    }
}

impl std::iter::Sum for OpCount {
    fn sum<I: Iterator<Item = OpCount>>(iter: I) -> OpCount {
        iter.fold(OpCount::ZERO, |a, b| a + b)
    }
}
