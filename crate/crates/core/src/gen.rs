//! Seeded generators for test systems and MPC instances.
//!
//! Entries are standard normal. The dynamics matrix is rescaled to the
//! target spectral radius whenever it exceeds it, and draws that are not
//! controllable are discarded. Input matrices share the block pattern of
//! the dynamics, except for the cascade, where every stage owns its input.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::numerical_rank;
use crate::problem::{ConstraintSet, LtiSystem, MpcProblem, Partition, Trajectory};
use crate::structure::{check_controllable, check_semiconvergent, DEFAULT_RANK_TOL, DEFAULT_SPECTRAL_TOL};

pub const DEFAULT_SPECTRAL_RADIUS: f64 = 0.95;
pub const DEFAULT_FILL: f64 = 0.1;
pub const MAX_ATTEMPTS: usize = 100;
/// Input weight of generated MPC problems (state weight is the identity).
pub const INPUT_WEIGHT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Cascade,
    Full,
    Sparse,
    LowerTriangular,
    Banded,
    LowerBanded,
    Star,
    ExampleUnstructured,
    RingChain,
}

impl Category {
    /// The six random categories of the separation-tendency study.
    pub const STUDY: [Category; 6] =
        [Category::Full, Category::Sparse, Category::LowerTriangular, Category::Banded, Category::LowerBanded, Category::Star];

    pub fn name(&self) -> &'static str {
        match self {
            Category::Cascade => "cascade",
            Category::Full => "full",
            Category::Sparse => "sparse",
            Category::LowerTriangular => "lower_triangular",
            Category::Banded => "banded",
            Category::LowerBanded => "lower_banded",
            Category::Star => "star",
            Category::ExampleUnstructured => "example_unstructured",
            Category::RingChain => "ring_chain",
        }
    }
}

impl std::str::FromStr for Category {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let all = [
            Category::Cascade,
            Category::Full,
            Category::Sparse,
            Category::LowerTriangular,
            Category::Banded,
            Category::LowerBanded,
            Category::Star,
            Category::ExampleUnstructured,
            Category::RingChain,
        ];
        all.into_iter().find(|c| c.name() == s).ok_or_else(|| Error::InvalidConfig(format!("unknown category '{s}'")))
    }
}

/// Full description of a generated system; the seed fixes every entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub category: Category,
    pub xdims: Vec<usize>,
    pub udims: Vec<usize>,
    pub seed: u64,
    pub spectral_radius_target: f64,
    /// Rank of the stage couplings (cascade only).
    pub coupling_rank: usize,
    /// Off-diagonal fill probability (sparse only).
    pub fill: f64,
}

impl GenSpec {
    pub fn new(category: Category, xdims: Vec<usize>, udims: Vec<usize>, seed: u64) -> Self {
        GenSpec {
            category,
            xdims,
            udims,
            seed,
            spectral_radius_target: DEFAULT_SPECTRAL_RADIUS,
            coupling_rank: 1,
            fill: DEFAULT_FILL,
        }
    }

    /// `m` blocks that split `nx` states as evenly as possible, one input each.
    pub fn even(category: Category, nx: usize, m: usize, seed: u64) -> Self {
        let xdims = (0..m).map(|i| nx / m + usize::from(i < nx % m)).collect();
        GenSpec::new(category, xdims, vec![1; m], seed)
    }

    fn validate(&self) -> Result<()> {
        if self.xdims.is_empty() || self.xdims.len() != self.udims.len() {
            return Err(Error::InvalidConfig("xdims and udims must be non-empty and of equal length".into()));
        }
        if self.xdims.contains(&0) {
            return Err(Error::InvalidConfig("every block needs at least one state".into()));
        }
        if !(self.spectral_radius_target > 0.0 && self.spectral_radius_target < 1.0) {
            return Err(Error::InvalidConfig(format!("spectral radius target {} outside (0, 1)", self.spectral_radius_target)));
        }
        if !(0.0..=1.0).contains(&self.fill) {
            return Err(Error::InvalidConfig(format!("fill probability {} outside [0, 1]", self.fill)));
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| normal(rng))
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.complex_eigenvalues().iter().map(|l| l.norm()).fold(0.0, f64::max)
}

fn offsets(dims: &[usize]) -> Vec<usize> {
    let mut o = vec![0];
    for d in dims {
        o.push(o.last().unwrap() + d);
    }
    o
}

/// Whether block `(i, j)` of the dynamics matrix may be nonzero.
pub fn block_pattern(category: Category, m: usize, i: usize, j: usize) -> bool {
    match category {
        Category::Full | Category::ExampleUnstructured => true,
        Category::Sparse => true,
        Category::LowerTriangular => j <= i,
        Category::Banded => i.abs_diff(j) <= 1,
        Category::LowerBanded | Category::Cascade => j == i || j + 1 == i,
        Category::Star => i == j || i == 0 || j == 0,
        Category::RingChain => i == j || i + 1 == j || (m > 1 && i == m - 1 && j == 0),
    }
}

/// Whether block `(i, j)` of the input matrix may be nonzero: the dynamics
/// pattern, except for the cascade whose inputs act locally.
pub fn input_pattern(category: Category, m: usize, i: usize, j: usize) -> bool {
    match category {
        Category::Cascade | Category::RingChain => i == j,
        _ => block_pattern(category, m, i, j),
    }
}

fn draw(spec: &GenSpec, rng: &mut ChaCha8Rng) -> LtiSystem {
    let m = spec.xdims.len();
    let xo = offsets(&spec.xdims);
    let uo = offsets(&spec.udims);
    let mut a = DMatrix::zeros(xo[m], xo[m]);
    let mut b = DMatrix::zeros(xo[m], uo[m]);
    for i in 0..m {
        for j in 0..m {
            if !block_pattern(spec.category, m, i, j) {
                continue;
            }
            let (r, c) = (spec.xdims[i], spec.xdims[j]);
            let block = if spec.category == Category::Cascade && i != j {
                let mut blk = DMatrix::zeros(r, c);
                for _ in 0..spec.coupling_rank {
                    let p = normal_matrix(rng, r, 1);
                    let q = normal_matrix(rng, 1, c);
                    blk += p * q;
                }
                blk
            } else if spec.category == Category::Sparse && i != j {
                DMatrix::from_fn(r, c, |_, _| if rng.random::<f64>() < spec.fill { normal(rng) } else { 0.0 })
            } else {
                normal_matrix(rng, r, c)
            };
            a.view_mut((xo[i], xo[j]), (r, c)).copy_from(&block);
        }
        for j in 0..m {
            if !input_pattern(spec.category, m, i, j) {
                continue;
            }
            let (r, c) = (spec.xdims[i], spec.udims[j]);
            let blk = if spec.category == Category::Sparse && i != j {
                DMatrix::from_fn(r, c, |_, _| if rng.random::<f64>() < spec.fill { normal(rng) } else { 0.0 })
            } else {
                normal_matrix(rng, r, c)
            };
            b.view_mut((xo[i], uo[j]), (r, c)).copy_from(&blk);
        }
    }
    let rad = spectral_radius(&a);
    if rad > spec.spectral_radius_target {
        a *= spec.spectral_radius_target / rad;
    }
    LtiSystem::new(a, b).expect("generated dimensions are consistent")
}

/// Generates a system of one of the random categories (including the
/// cascade) with its block partition.
pub fn gen_category(spec: &GenSpec) -> Result<(LtiSystem, Partition)> {
    spec.validate()?;
    match spec.category {
        Category::ExampleUnstructured => return Ok(example_unstructured()),
        Category::RingChain => {
            let (s, p, _) = gen_ring_chain(spec.xdims.len())?;
            return Ok((s, p));
        }
        Category::Cascade if spec.xdims.len() < 2 => {
            return Err(Error::InvalidConfig("a cascade needs at least two stages".into()));
        }
        _ => {}
    }
    let partition = Partition::new(spec.xdims.clone(), spec.udims.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for _ in 0..MAX_ATTEMPTS {
        let sys = draw(spec, &mut rng);
        if check_controllable(&sys.a, &sys.b, DEFAULT_RANK_TOL) && check_semiconvergent(&sys.a, DEFAULT_SPECTRAL_TOL) {
            return Ok((sys, partition));
        }
    }
    Err(Error::GenerationFailed(MAX_ATTEMPTS))
}

/// Cascade of `stages` blocks with lower block-bidiagonal dynamics whose
/// stage couplings have rank `coupling_rank`.
pub fn gen_cascade(stages: usize, xi: usize, ui: usize, coupling_rank: usize, seed: u64) -> Result<(LtiSystem, Partition)> {
    if stages < 2 {
        return Err(Error::InvalidConfig("a cascade needs at least two stages".into()));
    }
    if coupling_rank > xi {
        return Err(Error::InvalidConfig(format!("coupling rank {coupling_rank} exceeds stage size {xi}")));
    }
    let mut spec = GenSpec::new(Category::Cascade, vec![xi; stages], vec![ui; stages], seed);
    spec.coupling_rank = coupling_rank;
    let (sys, p) = gen_category(&spec)?;
    debug_assert!((1..stages).all(|i| {
        let blk = sys.a.view((i * xi, (i - 1) * xi), (xi, xi)).into_owned();
        numerical_rank(&blk, 1e-10) == coupling_rank
    }));
    Ok((sys, p))
}

/// The fully coupled two-state example with `A = ½·1`, `B = 1` and
/// partition `{1, 1}` / `{1, 0}`.
pub fn example_unstructured() -> (LtiSystem, Partition) {
    let sys = LtiSystem::new(DMatrix::from_element(2, 2, 0.5), DMatrix::from_element(2, 1, 1.0)).unwrap();
    (sys, Partition::new(vec![1, 1], vec![1, 0]).unwrap())
}

/// Chain of `m` two-state subsystems with one input each. Subsystem `i + 1`
/// drives subsystem `i` through a rank-one block and subsystem 1 drives
/// subsystem `m` through a full-rank block, so every subsystem affects
/// exactly one other. Returns the virtual-input sizes as well.
pub fn gen_ring_chain(m: usize) -> Result<(LtiSystem, Partition, Vec<usize>)> {
    if m == 0 {
        return Err(Error::InvalidConfig("chain needs at least one subsystem".into()));
    }
    let n = 2 * m;
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, m);
    let diag = DMatrix::from_row_slice(2, 2, &[0.6, 0.2, -0.1, 0.5]);
    let rank_one = DMatrix::from_row_slice(2, 2, &[0.1, 0.05, 0.2, 0.1]);
    let full = DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.05, 0.1]);
    for i in 0..m {
        a.view_mut((2 * i, 2 * i), (2, 2)).copy_from(&diag);
        if i + 1 < m {
            a.view_mut((2 * i, 2 * i + 2), (2, 2)).copy_from(&rank_one);
        }
        b[(2 * i + 1, i)] = 1.0;
    }
    if m > 1 {
        a.view_mut((n - 2, 0), (2, 2)).copy_from(&full);
    }
    let wdims = if m == 1 { Vec::new() } else { (0..m).map(|i| if i + 1 == m { 2 } else { 1 }).collect() };
    Ok((LtiSystem::new(a, b)?, Partition::new(vec![2; m], vec![1; m])?, wdims))
}

/// How generated MPC instances are bounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub horizon: usize,
    /// Bounds are this factor times the largest magnitude of the simulated
    /// trajectory, per component; `None` leaves the problem unconstrained.
    pub bound_margin: Option<f64>,
    /// Standard deviation of the reference perturbation.
    pub reference_noise: f64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec { horizon: 5, bound_margin: Some(1.1), reference_noise: 1.0 }
    }
}

/// A feasible MPC instance for `system`: a random initial state and input
/// sequence are simulated, the bounds are chosen to contain the simulated
/// trajectory, and the references perturb it.
pub fn scenario(system: &LtiSystem, spec: &ScenarioSpec, seed: u64) -> Result<MpcProblem> {
    let (nx, nu, n) = (system.nx(), system.nu(), spec.horizon);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x1 = DVector::from_fn(nx, |_, _| normal(&mut rng));
    let inputs: Vec<DVector<f64>> = (0..n).map(|_| DVector::from_fn(nu, |_, _| normal(&mut rng))).collect();
    let sim = Trajectory::simulate(system, &x1, inputs);
    let r_x: Vec<DVector<f64>> = sim.states.iter().map(|x| x + DVector::from_fn(nx, |_, _| spec.reference_noise * normal(&mut rng))).collect();
    let r_u: Vec<DVector<f64>> = sim.inputs.iter().map(|u| u + DVector::from_fn(nu, |_, _| spec.reference_noise * normal(&mut rng))).collect();
    let (xset, uset) = match spec.bound_margin {
        None => (ConstraintSet::Unbounded, ConstraintSet::Unbounded),
        Some(margin) => {
            if margin < 1.0 {
                return Err(Error::InvalidConfig(format!("bound margin {margin} < 1 makes the instance infeasible")));
            }
            let peak = |v: &[DVector<f64>], d: usize| {
                DVector::from_fn(d, |j, _| margin * v.iter().map(|x| x[j].abs()).fold(0.0, f64::max).max(1e-3))
            };
            (ConstraintSet::symmetric_box(&peak(&sim.states, nx)), ConstraintSet::symmetric_box(&peak(&sim.inputs, nu)))
        }
    };
    MpcProblem::new(
        system.clone(),
        n,
        DMatrix::identity(nx, nx),
        DMatrix::identity(nu, nu) * INPUT_WEIGHT,
        r_x,
        r_u,
        x1,
        xset,
        uset,
    )
}

/// Unconstrained regulation to the origin from a random initial state.
pub fn regulation(system: &LtiSystem, horizon: usize, seed: u64) -> Result<MpcProblem> {
    let (nx, nu) = (system.nx(), system.nu());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x1 = DVector::from_fn(nx, |_, _| normal(&mut rng));
    MpcProblem::new(
        system.clone(),
        horizon,
        DMatrix::identity(nx, nx),
        DMatrix::identity(nu, nu) * INPUT_WEIGHT,
        vec![DVector::zeros(nx); horizon],
        vec![DVector::zeros(nu); horizon],
        x1,
        ConstraintSet::Unbounded,
        ConstraintSet::Unbounded,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::decompose;
    use crate::structure::analyze;

    #[test]
    fn cascade_dimensions() {
        let (sys, p) = gen_cascade(20, 6, 1, 1, 7).unwrap();
        assert_eq!((sys.nx(), sys.nu(), p.m()), (120, 20, 20));
        assert!(spectral_radius(&sys.a) <= DEFAULT_SPECTRAL_RADIUS + 1e-12);
        for i in 1..20 {
            let blk = sys.a.view((6 * i, 6 * (i - 1)), (6, 6)).into_owned();
            assert_eq!(numerical_rank(&blk, 1e-10), 1);
        }
    }

    #[test]
    fn rank_zero_cascade_is_block_diagonal() {
        let (sys, p) = gen_cascade(2, 3, 1, 0, 1).unwrap();
        assert!(sys.a.view((3, 0), (3, 3)).iter().all(|&v| v == 0.0));
        assert!((analyze(&sys, &p).unwrap().s.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn example_is_idempotent() {
        let (sys, _) = example_unstructured();
        assert_eq!(&sys.a * &sys.a, sys.a);
    }

    #[test]
    fn chain_is_out1() {
        for m in 1..=15 {
            let (sys, p, w) = gen_ring_chain(m).unwrap();
            assert_eq!(sys.nx(), 2 * m);
            let d = decompose(&sys, &p, 1e-10).unwrap();
            assert!(d.out1);
            let got: Vec<usize> = if m == 1 { Vec::new() } else { d.wdims.clone() };
            assert_eq!(got, w);
        }
    }

    #[test]
    fn patterns_match_adjacency() {
        // one-leaf star couples both ways, like a two-block full pattern
        for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            assert_eq!(block_pattern(Category::Star, 2, i, j), block_pattern(Category::Full, 2, i, j));
        }
        assert!(!block_pattern(Category::Star, 3, 1, 2));
        assert!(!block_pattern(Category::LowerBanded, 3, 2, 0));
        assert!(block_pattern(Category::LowerTriangular, 3, 2, 0));
        assert!(!block_pattern(Category::Banded, 3, 0, 2));
    }

    #[test]
    fn scenario_is_feasible() {
        let (sys, _) = gen_cascade(3, 2, 1, 1, 3).unwrap();
        let p = scenario(&sys, &ScenarioSpec::default(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x1 = DVector::from_fn(sys.nx(), |_, _| normal(&mut rng));
        let inputs: Vec<DVector<f64>> = (0..5).map(|_| DVector::from_fn(sys.nu(), |_, _| normal(&mut rng))).collect();
        let sim = Trajectory::simulate(&sys, &x1, inputs);
        assert!(sim.states.iter().all(|x| p.xset.contains(x.as_slice())));
        assert!(sim.inputs.iter().all(|u| p.uset.contains(u.as_slice())));
    }
}
