//! MPC problem data, partitions and the internal/external decomposition.

mod decompose;
mod file;
mod stacked;

pub use decompose::{decompose, Decomposition, DEFAULT_RANK_TOL};
pub use file::{BoundsFile, PartitionFile, ProblemFile};
pub use stacked::{build_stacked, verify_equivalence, CouplingRow, PartitionedProblem, Subsystem};

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::Tally;

/// Relative tolerance for the block-diagonality test on `Q` and `R`.
pub const BLOCK_DIAG_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-12;
const PSD_TOL: f64 = -1e-10;

/// Discrete-time LTI system `x⁺ = A x + B u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LtiSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if a.nrows() == 0 || a.nrows() != a.ncols() {
            return Err(Error::DimensionMismatch(format!("A must be square and non-empty, got {}x{}", a.nrows(), a.ncols())));
        }
        if b.nrows() != a.nrows() {
            return Err(Error::DimensionMismatch(format!("B has {} rows, A has {}", b.nrows(), a.nrows())));
        }
        Ok(LtiSystem { a, b })
    }

    pub fn nx(&self) -> usize {
        self.a.nrows()
    }

    pub fn nu(&self) -> usize {
        self.b.ncols()
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }
}

/// Projection callback of a user-defined convex set.
pub type Projector = Arc<dyn Fn(&mut [f64]) + Send + Sync>;

/// A convex set given only through its projection.
#[derive(Clone)]
pub struct CustomSet {
    pub dim: usize,
    pub project: Projector,
    /// Per-subsystem factors; required for the set to split under a
    /// non-trivial partition (separability cannot be inferred from a
    /// projection alone).
    pub factors: Option<Vec<ConstraintSet>>,
}

impl fmt::Debug for CustomSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomSet").field("dim", &self.dim).field("factors", &self.factors).finish()
    }
}

#[derive(Debug, Clone)]
pub enum ConstraintSet {
    Unbounded,
    Box { lower: DVector<f64>, upper: DVector<f64> },
    Custom(CustomSet),
}

impl ConstraintSet {
    pub fn new_box(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch("box bounds of different length".into()));
        }
        if let Some(i) = (0..lower.len()).find(|&i| !(lower[i] <= upper[i])) {
            return Err(Error::InvalidConfig(format!("box bound {i}: lower {} > upper {}", lower[i], upper[i])));
        }
        Ok(ConstraintSet::Box { lower, upper })
    }

    /// Symmetric box `[-b, b]`.
    pub fn symmetric_box(bound: &DVector<f64>) -> Self {
        ConstraintSet::Box { lower: -bound, upper: bound.clone() }
    }

    pub fn dim(&self) -> Option<usize> {
        match self {
            ConstraintSet::Unbounded => None,
            ConstraintSet::Box { lower, .. } => Some(lower.len()),
            ConstraintSet::Custom(c) => Some(c.dim),
        }
    }

    pub fn is_box_like(&self) -> bool {
        !matches!(self, ConstraintSet::Custom(_))
    }

    /// Projects in place. Box projection is `median(lower, z, upper)`
    /// element-wise, two comparisons per element.
    pub fn project_in_place<T: Tally>(&self, z: &mut [f64], t: &mut T) {
        match self {
            ConstraintSet::Unbounded => {}
            ConstraintSet::Box { lower, upper } => {
                for (i, zi) in z.iter_mut().enumerate() {
                    *zi = zi.max(lower[i]).min(upper[i]);
                }
                t.add(2 * z.len() as u64, 0);
            }
            ConstraintSet::Custom(c) => (c.project)(z),
        }
    }

    pub fn project(&self, z: &[f64]) -> Vec<f64> {
        let mut out = z.to_vec();
        self.project_in_place(&mut out, &mut crate::ops::NoTally);
        out
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        match self {
            ConstraintSet::Unbounded => true,
            ConstraintSet::Box { lower, upper } => z.iter().enumerate().all(|(i, &v)| lower[i] <= v && v <= upper[i]),
            ConstraintSet::Custom(_) => self.project(z) == z,
        }
    }

    /// Splits the set into factors over consecutive groups of `dims`.
    pub fn split(&self, dims: &[usize]) -> std::result::Result<Vec<ConstraintSet>, String> {
        match self {
            ConstraintSet::Unbounded => Ok(vec![ConstraintSet::Unbounded; dims.len()]),
            ConstraintSet::Box { lower, upper } => {
                let mut off = 0;
                let mut out = Vec::with_capacity(dims.len());
                for &d in dims {
                    out.push(ConstraintSet::Box {
                        lower: lower.rows(off, d).into_owned(),
                        upper: upper.rows(off, d).into_owned(),
                    });
                    off += d;
                }
                Ok(out)
            }
            ConstraintSet::Custom(c) => {
                if dims.len() == 1 {
                    return Ok(vec![self.clone()]);
                }
                match &c.factors {
                    Some(f) if f.len() == dims.len() && f.iter().zip(dims).all(|(s, &d)| s.dim().is_none_or(|sd| sd == d)) => {
                        Ok(f.clone())
                    }
                    Some(_) => Err("custom set factors do not match the partition".into()),
                    None => Err("custom set does not declare per-subsystem factors".into()),
                }
            }
        }
    }
}

/// Consecutive grouping of states and inputs into `M` subsystems.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub xdims: Vec<usize>,
    pub udims: Vec<usize>,
}

impl Partition {
    pub fn new(xdims: Vec<usize>, udims: Vec<usize>) -> Result<Self> {
        if xdims.is_empty() {
            return Err(Error::DimensionMismatch("partition needs at least one subsystem".into()));
        }
        if xdims.len() != udims.len() {
            return Err(Error::DimensionMismatch(format!("{} state groups but {} input groups", xdims.len(), udims.len())));
        }
        if let Some(i) = xdims.iter().position(|&d| d == 0) {
            return Err(Error::DimensionMismatch(format!("subsystem {i} has no states")));
        }
        Ok(Partition { xdims, udims })
    }

    pub fn trivial(nx: usize, nu: usize) -> Self {
        Partition { xdims: vec![nx], udims: vec![nu] }
    }

    pub fn m(&self) -> usize {
        self.xdims.len()
    }

    pub fn nx(&self) -> usize {
        self.xdims.iter().sum()
    }

    pub fn nu(&self) -> usize {
        self.udims.iter().sum()
    }

    pub fn x_offsets(&self) -> Vec<usize> {
        offsets(&self.xdims)
    }

    pub fn u_offsets(&self) -> Vec<usize> {
        offsets(&self.udims)
    }

    pub fn state_owner(&self) -> Vec<usize> {
        owners(&self.xdims)
    }

    pub fn input_owner(&self) -> Vec<usize> {
        owners(&self.udims)
    }

    pub fn check_system(&self, sys: &LtiSystem) -> Result<()> {
        if self.nx() != sys.nx() || self.nu() != sys.nu() {
            return Err(Error::DimensionMismatch(format!(
                "partition covers {} states / {} inputs, system has {} / {}",
                self.nx(),
                self.nu(),
                sys.nx(),
                sys.nu()
            )));
        }
        Ok(())
    }
}

fn offsets(d: &[usize]) -> Vec<usize> {
    let mut o = Vec::with_capacity(d.len() + 1);
    let mut acc = 0;
    for &v in d {
        o.push(acc);
        acc += v;
    }
    o.push(acc);
    o
}

fn owners(d: &[usize]) -> Vec<usize> {
    d.iter().enumerate().flat_map(|(i, &n)| std::iter::repeat_n(i, n)).collect()
}

/// Horizon-`N` tracking problem
/// `min Σ_k ½‖x^{k+1} − r_x^k‖²_Q + ½‖u^k − r_u^k‖²_R` subject to the
/// dynamics and `(x^{k+1}, u^k) ∈ X × U`.
///
/// `r_x[k]` is the reference for `x^{k+2}` and `r_u[k]` the one for
/// `u^{k+1}` (zero-based storage of the one-based stage index).
#[derive(Debug, Clone)]
pub struct MpcProblem {
    pub system: LtiSystem,
    pub horizon: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub r_x: Vec<DVector<f64>>,
    pub r_u: Vec<DVector<f64>>,
    pub x1: DVector<f64>,
    pub xset: ConstraintSet,
    pub uset: ConstraintSet,
}

impl MpcProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        system: LtiSystem,
        horizon: usize,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        r_x: Vec<DVector<f64>>,
        r_u: Vec<DVector<f64>>,
        x1: DVector<f64>,
        xset: ConstraintSet,
        uset: ConstraintSet,
    ) -> Result<Self> {
        let (nx, nu) = (system.nx(), system.nu());
        if horizon == 0 {
            return Err(Error::InvalidConfig("horizon must be positive".into()));
        }
        check_weight("Q", &q, nx)?;
        check_weight("R", &r, nu)?;
        if r_x.len() != horizon || r_u.len() != horizon {
            return Err(Error::DimensionMismatch(format!(
                "reference lengths {} / {} differ from horizon {horizon}",
                r_x.len(),
                r_u.len()
            )));
        }
        if r_x.iter().any(|v| v.len() != nx) || r_u.iter().any(|v| v.len() != nu) {
            return Err(Error::DimensionMismatch("reference vector of wrong size".into()));
        }
        if x1.len() != nx {
            return Err(Error::DimensionMismatch(format!("x1 has length {}, expected {nx}", x1.len())));
        }
        for (name, set, n) in [("X", &xset, nx), ("U", &uset, nu)] {
            if set.dim().is_some_and(|d| d != n) {
                return Err(Error::DimensionMismatch(format!("set {name} has dimension {:?}, expected {n}", set.dim())));
            }
        }
        Ok(MpcProblem { system, horizon, q, r, r_x, r_u, x1, xset, uset })
    }

    pub fn nx(&self) -> usize {
        self.system.nx()
    }

    pub fn nu(&self) -> usize {
        self.system.nu()
    }

    /// Objective value of a trajectory.
    pub fn objective(&self, traj: &Trajectory) -> f64 {
        let mut v = 0.0;
        for k in 0..self.horizon {
            let ex = &traj.states[k] - &self.r_x[k];
            let eu = &traj.inputs[k] - &self.r_u[k];
            v += 0.5 * ex.dot(&(&self.q * &ex)) + 0.5 * eu.dot(&(&self.r * &eu));
        }
        v
    }

    /// Largest violation of the dynamics over the horizon.
    pub fn dynamics_residual(&self, traj: &Trajectory) -> f64 {
        let mut x = self.x1.clone();
        let mut worst = 0.0f64;
        for k in 0..self.horizon {
            let pred = self.system.step(&x, &traj.inputs[k]);
            worst = worst.max((&pred - &traj.states[k]).amax());
            x = traj.states[k].clone();
        }
        worst
    }
}

fn check_weight(name: &str, m: &DMatrix<f64>, n: usize) -> Result<()> {
    if m.nrows() != n || m.ncols() != n {
        return Err(Error::DimensionMismatch(format!("{name} is {}x{}, expected {n}x{n}", m.nrows(), m.ncols())));
    }
    if n == 0 {
        return Ok(());
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    if (m - m.transpose()).amax() > SYMMETRY_TOL * scale {
        return Err(Error::InvalidConfig(format!("{name} is not symmetric")));
    }
    let sym = (m + m.transpose()) * 0.5;
    let emin = sym.symmetric_eigenvalues().min();
    if emin < PSD_TOL * scale.max(1.0) {
        return Err(Error::InvalidConfig(format!("{name} is not positive semidefinite (eigenvalue {emin:e})")));
    }
    Ok(())
}

/// State/input trajectory of one MPC solve: `states[k] = x^{k+2}`,
/// `inputs[k] = u^{k+1}` for `k = 0..N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn zeros(nx: usize, nu: usize, horizon: usize) -> Self {
        Trajectory { states: vec![DVector::zeros(nx); horizon], inputs: vec![DVector::zeros(nu); horizon] }
    }

    /// Forward simulation from `x1` under `inputs`.
    pub fn simulate(sys: &LtiSystem, x1: &DVector<f64>, inputs: Vec<DVector<f64>>) -> Self {
        let mut x = x1.clone();
        let mut states = Vec::with_capacity(inputs.len());
        for u in &inputs {
            x = sys.step(&x, u);
            states.push(x.clone());
        }
        Trajectory { states, inputs }
    }

    /// Concatenation `[x; u]` over the horizon.
    pub fn flatten(&self) -> Vec<f64> {
        self.states.iter().chain(self.inputs.iter()).flat_map(|v| v.iter().copied()).collect()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Trajectory {
            states: self.states.iter().map(|v| v * s).collect(),
            inputs: self.inputs.iter().map(|v| v * s).collect(),
        }
    }
}

/// Outcome of a successful admissibility check: the per-subsystem factors of
/// the weights and the constraint sets.
#[derive(Debug, Clone)]
pub struct AdmissibilityReport {
    pub q_blocks: Vec<DMatrix<f64>>,
    pub r_blocks: Vec<DMatrix<f64>>,
    pub xsets: Vec<ConstraintSet>,
    pub usets: Vec<ConstraintSet>,
    /// Relative tolerance used for the block-diagonality test.
    pub tolerance: f64,
}

/// Checks whether `partition` decomposes the objective and the constraint
/// sets of `problem`.
pub fn validate_admissibility(problem: &MpcProblem, partition: &Partition) -> Result<AdmissibilityReport> {
    partition.check_system(&problem.system)?;
    let mut violations = Vec::new();
    off_block_entries("Q", &problem.q, &partition.xdims, &mut violations);
    off_block_entries("R", &problem.r, &partition.udims, &mut violations);
    let xsets = problem.xset.split(&partition.xdims).unwrap_or_else(|e| {
        violations.push(format!("X: {e}"));
        Vec::new()
    });
    let usets = problem.uset.split(&partition.udims).unwrap_or_else(|e| {
        violations.push(format!("U: {e}"));
        Vec::new()
    });
    if !violations.is_empty() {
        return Err(Error::NotAdmissible(violations));
    }
    Ok(AdmissibilityReport {
        q_blocks: diag_blocks(&problem.q, &partition.xdims),
        r_blocks: diag_blocks(&problem.r, &partition.udims),
        xsets,
        usets,
        tolerance: BLOCK_DIAG_TOL,
    })
}

fn off_block_entries(name: &str, m: &DMatrix<f64>, dims: &[usize], out: &mut Vec<String>) {
    if dims.len() == 1 {
        return;
    }
    let owner = owners(dims);
    let tol = BLOCK_DIAG_TOL * m.norm();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if owner[i] != owner[j] && m[(i, j)].abs() > tol {
                out.push(format!("{name}[{i},{j}] = {}", m[(i, j)]));
            }
        }
    }
}

pub(crate) fn diag_blocks(m: &DMatrix<f64>, dims: &[usize]) -> Vec<DMatrix<f64>> {
    let off = offsets(dims);
    dims.iter().enumerate().map(|(i, &d)| m.view((off[i], off[i]), (d, d)).into_owned()).collect()
}
