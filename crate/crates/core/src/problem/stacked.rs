use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use super::{decompose, validate_admissibility, ConstraintSet, Decomposition, MpcProblem, Partition, Trajectory};
use crate::error::{Error, Result};
use crate::linalg::SparseRows;

const EQUIVALENCE_TOL: f64 = 1e-9;

/// Stacked data of one virtual subsystem. Its variable is
/// `y_i = [u_i^1; w_i^1; x_i^2; …; u_i^N; w_i^N; x_i^{N+1}]`.
#[derive(Debug, Clone)]
pub struct Subsystem {
    pub nx: usize,
    pub nu: usize,
    pub nw: usize,
    /// Position of `y_i` inside the global `y`.
    pub offset: usize,
    pub a_ii: DMatrix<f64>,
    pub b_ii: DMatrix<f64>,
    pub w: DMatrix<f64>,
    /// One stage of the Hessian: `diag(R_i, 0, Q_i)`.
    pub stage_hessian: DMatrix<f64>,
    pub q: DVector<f64>,
    pub k: f64,
    pub c_mat: SparseRows,
    pub c: DVector<f64>,
    pub uset: ConstraintSet,
    pub xset: ConstraintSet,
}

impl Subsystem {
    pub fn stage_len(&self) -> usize {
        self.nu + self.nw + self.nx
    }

    pub fn ydim(&self) -> usize {
        self.q.len()
    }

    pub fn horizon(&self) -> usize {
        self.ydim() / self.stage_len()
    }

    /// Local offsets of `u_i^k`, `w_i^k`, `x_i^{k+1}` for stage `k` (zero-based).
    pub fn stage_offsets(&self, k: usize) -> (usize, usize, usize) {
        let s = k * self.stage_len();
        (s, s + self.nu, s + self.nu + self.nw)
    }

    /// `I_N ⊗ diag(R_i, 0, Q_i)` as a dense matrix.
    pub fn hessian(&self) -> DMatrix<f64> {
        let (n, s) = (self.ydim(), self.stage_len());
        let mut h = DMatrix::zeros(n, n);
        for k in 0..self.horizon() {
            h.view_mut((k * s, k * s), (s, s)).copy_from(&self.stage_hessian);
        }
        h
    }

    /// Projects a slice of `y_i` onto `Y_i` in place.
    pub fn project<T: crate::ops::Tally>(&self, yi: &mut [f64], t: &mut T) {
        for k in 0..self.horizon() {
            let (u, _, x) = self.stage_offsets(k);
            self.uset.project_in_place(&mut yi[u..u + self.nu], t);
            self.xset.project_in_place(&mut yi[x..x + self.nx], t);
        }
    }

    pub fn contains(&self, yi: &[f64]) -> bool {
        (0..self.horizon()).all(|k| {
            let (u, _, x) = self.stage_offsets(k);
            self.uset.contains(&yi[u..u + self.nu]) && self.xset.contains(&yi[x..x + self.nx])
        })
    }
}

/// One reduced coupling row `W_iᵀ(Aext x^k + Bext u^k) − w_i^k = d`.
#[derive(Debug, Clone)]
pub struct CouplingRow {
    /// Zero-based time step `k − 1`.
    pub time: usize,
    pub subsystem: usize,
    /// `(global y index, coefficient)`.
    pub entries: Vec<(usize, f64)>,
    pub rhs: f64,
}

/// The problem rewritten over the virtual subsystems.
#[derive(Debug, Clone)]
pub struct PartitionedProblem {
    pub horizon: usize,
    pub subsystems: Vec<Subsystem>,
    pub coupling: Vec<CouplingRow>,
    /// `perm[j]` is the `y` index stored at position `j` of the time-sorted vector.
    pub perm: Vec<usize>,
    /// Ranges of the time-sorted vector belonging to `ȳ^1, …, ȳ^{N+1}`.
    pub time_blocks: Vec<Range<usize>>,
    pub decomposition: Decomposition,
    pub x1: DVector<f64>,
}

impl PartitionedProblem {
    /// Decomposes with the default rank tolerance and stacks.
    pub fn new(problem: &MpcProblem, partition: &Partition) -> Result<Self> {
        let dec = decompose(&problem.system, partition, super::DEFAULT_RANK_TOL)?;
        build_stacked(problem, partition, &dec)
    }

    /// Single-subsystem form used by conventional ADMM.
    pub fn conventional(problem: &MpcProblem) -> Result<Self> {
        Self::new(problem, &Partition::trivial(problem.nx(), problem.nu()))
    }

    pub fn m(&self) -> usize {
        self.subsystems.len()
    }

    pub fn ydim(&self) -> usize {
        self.subsystems.iter().map(Subsystem::ydim).sum()
    }

    pub fn wdim(&self) -> usize {
        self.subsystems.iter().map(|s| s.nw).sum()
    }

    pub fn out1(&self) -> bool {
        self.decomposition.out1
    }

    pub fn partition(&self) -> &Partition {
        &self.decomposition.partition
    }

    pub fn range(&self, i: usize) -> Range<usize> {
        let s = &self.subsystems[i];
        s.offset..s.offset + s.ydim()
    }

    /// `Σ_i ½ y_iᵀ𝒬_i y_i + q_iᵀ y_i + K_i`.
    pub fn objective(&self, y: &[f64]) -> f64 {
        let mut v = 0.0;
        for s in &self.subsystems {
            let n = s.stage_len();
            for k in 0..s.horizon() {
                let base = s.offset + k * n;
                let yk = DVector::from_column_slice(&y[base..base + n]);
                v += 0.5 * yk.dot(&(&s.stage_hessian * &yk));
            }
            v += s.q.iter().zip(&y[s.offset..s.offset + s.ydim()]).map(|(a, b)| a * b).sum::<f64>() + s.k;
        }
        v
    }

    /// `‖C_i y_i − c_i‖∞`.
    pub fn dynamics_residual(&self, i: usize, yi: &[f64]) -> f64 {
        let s = &self.subsystems[i];
        let mut out = vec![0.0; s.c.len()];
        s.c_mat.mul_vec_into(yi, Some(s.c.as_slice()), &mut out, &mut crate::ops::NoTally);
        crate::linalg::max_abs(&out)
    }

    /// `‖D y − d‖∞`.
    pub fn coupling_residual(&self, y: &[f64]) -> f64 {
        self.coupling
            .iter()
            .map(|r| (r.entries.iter().map(|&(j, v)| v * y[j]).sum::<f64>() - r.rhs).abs())
            .fold(0.0, f64::max)
    }

    pub fn in_constraint_set(&self, y: &[f64]) -> bool {
        self.subsystems.iter().all(|s| s.contains(&y[s.offset..s.offset + s.ydim()]))
    }

    /// Dense `(D, d)`.
    pub fn coupling_matrix(&self) -> (DMatrix<f64>, DVector<f64>) {
        let mut d = DMatrix::zeros(self.coupling.len(), self.ydim());
        for (r, row) in self.coupling.iter().enumerate() {
            for &(j, v) in &row.entries {
                d[(r, j)] = v;
            }
        }
        (d, DVector::from_iterator(self.coupling.len(), self.coupling.iter().map(|r| r.rhs)))
    }

    /// Dense permutation matrix `P` with `P y = ȳ`.
    pub fn permutation_matrix(&self) -> DMatrix<f64> {
        let n = self.ydim();
        let mut p = DMatrix::zeros(n, n);
        for (row, &col) in self.perm.iter().enumerate() {
            p[(row, col)] = 1.0;
        }
        p
    }

    /// Lifts a trajectory, filling `w_i^k = W_iᵀ(external flow into i)`.
    pub fn lift(&self, traj: &Trajectory) -> DVector<f64> {
        let dec = &self.decomposition;
        let xo = dec.partition.x_offsets();
        let uo = dec.partition.u_offsets();
        let mut y = DVector::zeros(self.ydim());
        for k in 0..self.horizon {
            let xk = if k == 0 { &self.x1 } else { &traj.states[k - 1] };
            let ext = &dec.aext * xk + &dec.bext * &traj.inputs[k];
            for (i, s) in self.subsystems.iter().enumerate() {
                let (u, w, x) = s.stage_offsets(k);
                let b = s.offset;
                y.rows_mut(b + u, s.nu).copy_from(&traj.inputs[k].rows(uo[i], s.nu));
                y.rows_mut(b + w, s.nw).copy_from(&(s.w.transpose() * ext.rows(xo[i], s.nx)));
                y.rows_mut(b + x, s.nx).copy_from(&traj.states[k].rows(xo[i], s.nx));
            }
        }
        y
    }

    /// Drops the virtual inputs from a stacked vector.
    pub fn extract(&self, y: &[f64]) -> Trajectory {
        let p = &self.decomposition.partition;
        let (xo, uo) = (p.x_offsets(), p.u_offsets());
        let mut traj = Trajectory::zeros(p.nx(), p.nu(), self.horizon);
        for k in 0..self.horizon {
            for (i, s) in self.subsystems.iter().enumerate() {
                let (u, _, x) = s.stage_offsets(k);
                let b = s.offset;
                traj.inputs[k].rows_mut(uo[i], s.nu).copy_from_slice(&y[b + u..b + u + s.nu]);
                traj.states[k].rows_mut(xo[i], s.nx).copy_from_slice(&y[b + x..b + x + s.nx]);
            }
        }
        traj
    }
}

pub fn build_stacked(problem: &MpcProblem, partition: &Partition, dec: &Decomposition) -> Result<PartitionedProblem> {
    let report = validate_admissibility(problem, partition)?;
    if dec.partition != *partition {
        return Err(Error::DimensionMismatch("decomposition was built for a different partition".into()));
    }
    let n = problem.horizon;
    let m = partition.m();
    let xo = partition.x_offsets();
    let uo = partition.u_offsets();

    let mut subsystems = Vec::with_capacity(m);
    let mut offset = 0;
    for i in 0..m {
        let (nx, nu, nw) = (partition.xdims[i], partition.udims[i], dec.wdims[i]);
        let stage = nu + nw + nx;
        let ydim = n * stage;
        let mut stage_hessian = DMatrix::zeros(stage, stage);
        stage_hessian.view_mut((0, 0), (nu, nu)).copy_from(&report.r_blocks[i]);
        stage_hessian.view_mut((nu + nw, nu + nw), (nx, nx)).copy_from(&report.q_blocks[i]);

        let mut r_y = DVector::zeros(ydim);
        for k in 0..n {
            let s = k * stage;
            r_y.rows_mut(s, nu).copy_from(&problem.r_u[k].rows(uo[i], nu));
            r_y.rows_mut(s + nu + nw, nx).copy_from(&problem.r_x[k].rows(xo[i], nx));
        }
        let mut q = DVector::zeros(ydim);
        let mut k_const = 0.0;
        for k in 0..n {
            let rk = r_y.rows(k * stage, stage);
            let hr = &stage_hessian * rk;
            q.rows_mut(k * stage, stage).copy_from(&(-&hr));
            k_const += 0.5 * rk.dot(&hr);
        }

        let a_ii = dec.a_block(i, i);
        let b_ii = dec.b_block(i, i);
        let w = dec.w[i].clone();
        let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n * nx);
        for k in 0..n {
            let s = k * stage;
            for r in 0..nx {
                let mut row = Vec::new();
                if k > 0 {
                    let prev_x = s - nx;
                    row.extend((0..nx).map(|c| (prev_x + c, a_ii[(r, c)])));
                }
                row.extend((0..nu).map(|c| (s + c, b_ii[(r, c)])));
                row.extend((0..nw).map(|c| (s + nu + c, w[(r, c)])));
                row.push((s + nu + nw + r, -1.0));
                rows.push(row);
            }
        }
        let c_mat = SparseRows::from_rows(ydim, &rows);
        let mut c = DVector::zeros(n * nx);
        let x1i = problem.x1.rows(xo[i], nx);
        c.rows_mut(0, nx).copy_from(&(-(&a_ii * x1i)));

        subsystems.push(Subsystem {
            nx,
            nu,
            nw,
            offset,
            a_ii,
            b_ii,
            w,
            stage_hessian,
            q,
            k: k_const,
            c_mat,
            c,
            uset: report.usets[i].clone(),
            xset: report.xsets[i].clone(),
        });
        offset += ydim;
    }

    // global positions of x^k (k ≥ 2), u^k and w^k, zero-based stage k
    let x_pos = |j: usize, k: usize, c: usize| {
        let s = &subsystems[j];
        s.offset + s.stage_offsets(k - 1).2 + c
    };
    let u_pos = |j: usize, k: usize, c: usize| subsystems[j].offset + subsystems[j].stage_offsets(k).0 + c;
    let w_pos = |j: usize, k: usize, c: usize| subsystems[j].offset + subsystems[j].stage_offsets(k).1 + c;

    let xown = partition.state_owner();
    let uown = partition.input_owner();
    let mut reduced = Vec::with_capacity(m);
    for i in 0..m {
        let (ae, be) = dec.external_rows(i);
        let wt = dec.w[i].transpose();
        reduced.push((&wt * ae, &wt * be));
    }
    let mut coupling = Vec::new();
    for k in 0..n {
        for i in 0..m {
            let (ar, br) = &reduced[i];
            for r in 0..dec.wdims[i] {
                let mut entries = Vec::new();
                let mut rhs = 0.0;
                for c in 0..partition.nx() {
                    let v = ar[(r, c)];
                    if v == 0.0 || xown[c] == i {
                        continue;
                    }
                    if k == 0 {
                        rhs -= v * problem.x1[c];
                    } else {
                        entries.push((x_pos(xown[c], k, c - xo[xown[c]]), v));
                    }
                }
                for c in 0..partition.nu() {
                    let v = br[(r, c)];
                    if v != 0.0 && uown[c] != i {
                        entries.push((u_pos(uown[c], k, c - uo[uown[c]]), v));
                    }
                }
                entries.push((w_pos(i, k, r), -1.0));
                coupling.push(CouplingRow { time: k, subsystem: i, entries, rhs });
            }
        }
    }

    let mut perm = Vec::with_capacity(offset);
    let mut time_blocks = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let start = perm.len();
        if k > 0 {
            for (j, s) in subsystems.iter().enumerate() {
                perm.extend((0..s.nx).map(|c| x_pos(j, k, c)));
            }
        }
        if k < n {
            for (j, s) in subsystems.iter().enumerate() {
                perm.extend((0..s.nu).map(|c| u_pos(j, k, c)));
            }
            for (j, s) in subsystems.iter().enumerate() {
                perm.extend((0..s.nw).map(|c| w_pos(j, k, c)));
            }
        }
        time_blocks.push(start..perm.len());
    }
    debug_assert_eq!(perm.len(), offset);

    Ok(PartitionedProblem {
        horizon: n,
        subsystems,
        coupling,
        perm,
        time_blocks,
        decomposition: dec.clone(),
        x1: problem.x1.clone(),
    })
}

/// Lifts `traj` into the stacked variables and checks all equality
/// constraints there.
pub fn verify_equivalence(problem: &MpcProblem, pp: &PartitionedProblem, traj: &Trajectory) -> bool {
    if traj.states.len() != problem.horizon || traj.inputs.len() != problem.horizon {
        return false;
    }
    let y = pp.lift(traj);
    let y = y.as_slice();
    (0..pp.m()).all(|i| pp.dynamics_residual(i, &y[pp.range(i)]) <= EQUIVALENCE_TOL)
        && pp.coupling_residual(y) <= EQUIVALENCE_TOL
}
