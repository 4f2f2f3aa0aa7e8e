//! System flow, link usage and separation tendency of a partitioned system.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::problem::{LtiSystem, Partition};

pub const DEFAULT_DECAY_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_K: usize = 10_000;
pub const DEFAULT_SPECTRAL_TOL: f64 = 1e-9;
pub const DEFAULT_RANK_TOL: f64 = 1e-10;
/// Separation tendency above which a partition is annotated as structured.
pub const STRUCTURED_THRESHOLD: f64 = 0.75;

/// `lim A^k` exists: all eigenvalues inside the unit disk except a
/// semisimple eigenvalue at 1.
pub fn check_semiconvergent(a: &DMatrix<f64>, tol: f64) -> bool {
    let n = a.nrows();
    if n == 0 {
        return true;
    }
    let eig = a.complex_eigenvalues();
    let mut at_one = 0;
    for l in eig.iter() {
        if (l - nalgebra::Complex::new(1.0, 0.0)).norm() <= tol.sqrt() {
            at_one += 1;
        } else if l.norm() >= 1.0 - tol {
            return false;
        }
    }
    if at_one == 0 {
        return true;
    }
    let shifted = a - DMatrix::identity(n, n);
    let sv = shifted.singular_values();
    let thresh = tol.sqrt() * a.amax().max(1.0);
    let geometric = sv.iter().filter(|&&s| s <= thresh).count();
    geometric == at_one
}

/// Rank of `[B, AB, …, A^{n−1}B]` through an orthonormalized Krylov sequence,
/// which avoids the scaling problems of explicit powers.
pub fn controllability_rank(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> usize {
    let n = a.nrows();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut block: Vec<DVector<f64>> = b.column_iter().map(|c| c.into_owned()).collect();
    let scale = b.amax().max(a.amax()).max(f64::MIN_POSITIVE);
    while !block.is_empty() && basis.len() < n {
        let mut added = Vec::new();
        for mut v in block {
            let before = v.norm();
            if before <= tol * scale {
                continue;
            }
            for _ in 0..2 {
                for q in &basis {
                    let c = q.dot(&v);
                    v -= q * c;
                }
            }
            let after = v.norm();
            if after > tol * before.max(scale) {
                let q = v / after;
                basis.push(q.clone());
                added.push(q);
                if basis.len() == n {
                    break;
                }
            }
        }
        block = added.iter().map(|q| a * q).collect();
    }
    basis.len()
}

pub fn check_controllable(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    controllability_rank(a, b, tol) == a.nrows()
}

/// Response of the difference system `Δx⁺ = AΔx + BΔu` to the input step
/// pair `Δu⁰ = d`, `Δu¹ = −d` from rest.
#[derive(Debug, Clone)]
pub struct FlowSequence {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    /// `Δx^k` for `k = 0..=truncation_k`.
    pub delta_x: Vec<DVector<f64>>,
    pub impulse: DVector<f64>,
    pub truncation_k: usize,
    /// The response decayed below the tolerance before `max_k`.
    pub converged: bool,
}

impl FlowSequence {
    pub fn delta_u(&self, k: usize) -> DVector<f64> {
        match k {
            0 => self.impulse.clone(),
            1 => -&self.impulse,
            _ => DVector::zeros(self.impulse.len()),
        }
    }

    /// `Φ^k = [A diag(Δx^k), B diag(Δu^k)]`.
    pub fn flow(&self, k: usize) -> DMatrix<f64> {
        let (nx, nu) = (self.a.nrows(), self.b.ncols());
        let mut phi = DMatrix::zeros(nx, nx + nu);
        let dx = &self.delta_x[k];
        let du = self.delta_u(k);
        for c in 0..nx {
            phi.column_mut(c).copy_from(&(self.a.column(c) * dx[c]));
        }
        for c in 0..nu {
            phi.column_mut(nx + c).copy_from(&(self.b.column(c) * du[c]));
        }
        phi
    }
}

/// `Γ_ij = (Σ_k |Φ^k_ij|²)^{1/2}`.
#[derive(Debug, Clone)]
pub struct LinkUsage {
    pub gamma: DMatrix<f64>,
}

/// Link usage of the unit input impulse.
pub fn link_usage(system: &LtiSystem, max_k: usize, decay_tol: f64) -> (FlowSequence, LinkUsage) {
    link_usage_with_impulse(system, &DVector::from_element(system.nu(), 1.0), max_k, decay_tol)
}

/// Link usage for the input impulse direction `impulse`. Truncates once
/// `‖Δx^k‖∞ < decay_tol` for `k ≥ 2` (the input no longer acts).
pub fn link_usage_with_impulse(system: &LtiSystem, impulse: &DVector<f64>, max_k: usize, decay_tol: f64) -> (FlowSequence, LinkUsage) {
    let (nx, nu) = (system.nx(), system.nu());
    let mut seq = FlowSequence {
        a: system.a.clone(),
        b: system.b.clone(),
        delta_x: vec![DVector::zeros(nx)],
        impulse: impulse.clone(),
        truncation_k: 0,
        converged: false,
    };
    let mut sq = DMatrix::<f64>::zeros(nx, nx + nu);
    let mut k = 0;
    loop {
        let dx = seq.delta_x[k].clone();
        if k >= 2 && dx.amax() < decay_tol {
            seq.converged = true;
            break;
        }
        if k == max_k {
            break;
        }
        let phi = seq.flow(k);
        sq += phi.component_mul(&phi);
        let du = seq.delta_u(k);
        seq.delta_x.push(&system.a * &dx + &system.b * &du);
        k += 1;
    }
    seq.truncation_k = k;
    (seq, LinkUsage { gamma: sq.map(f64::sqrt) })
}

#[derive(Debug, Clone, Serialize)]
pub struct SeparationTendency {
    pub rows: Vec<f64>,
    pub s: f64,
}

/// Row-wise ratio of mean internal to mean internal-plus-external link
/// usage, averaged over all rows. Rows without external links count as
/// fully separated (`s_i = 1`).
pub fn separation_tendency(gamma: &LinkUsage, partition: &Partition) -> Result<SeparationTendency> {
    let g = &gamma.gamma;
    let (nx, nu) = (partition.nx(), partition.nu());
    if g.nrows() != nx || g.ncols() != nx + nu {
        return Err(Error::DimensionMismatch(format!("link usage is {}x{}, partition needs {nx}x{}", g.nrows(), g.ncols(), nx + nu)));
    }
    let col_owner: Vec<usize> = partition.state_owner().into_iter().chain(partition.input_owner()).collect();
    let xown = partition.state_owner();
    let mut rows = Vec::with_capacity(nx);
    let mut zero_rows = Vec::new();
    for r in 0..nx {
        let (mut si, mut ni, mut se, mut ne) = (0.0, 0usize, 0.0, 0usize);
        for c in 0..nx + nu {
            if col_owner[c] == xown[r] {
                si += g[(r, c)];
                ni += 1;
            } else {
                se += g[(r, c)];
                ne += 1;
            }
        }
        let mi = si / ni as f64;
        let me = if ne > 0 { se / ne as f64 } else { 0.0 };
        if mi + me == 0.0 {
            zero_rows.push(r);
            rows.push(f64::NAN);
        } else if ne == 0 {
            rows.push(1.0);
        } else {
            rows.push(mi / (mi + me));
        }
    }
    if !zero_rows.is_empty() {
        return Err(Error::Undefined(zero_rows));
    }
    let s = rows.iter().sum::<f64>() / nx as f64;
    Ok(SeparationTendency { rows, s })
}

#[derive(Debug, Clone, Serialize)]
pub struct StructureReport {
    pub s_rows: Option<Vec<f64>>,
    pub s: Option<f64>,
    /// `s` is defined (no zero rows in the link usage).
    pub exists: bool,
    pub undefined_rows: Vec<usize>,
    pub semiconvergent: bool,
    pub controllable: bool,
    pub flow_converged: bool,
    pub truncation_k: usize,
    /// `s ≥ 0.75`; informational only.
    pub structured: Option<bool>,
    #[serde(skip)]
    pub gamma: LinkUsage,
}

/// Runs every structure check with default tolerances.
pub fn analyze(system: &LtiSystem, partition: &Partition) -> Result<StructureReport> {
    partition.check_system(system)?;
    let (seq, gamma) = link_usage(system, DEFAULT_MAX_K, DEFAULT_DECAY_TOL);
    let (s_rows, s, undefined_rows) = match separation_tendency(&gamma, partition) {
        Ok(st) => (Some(st.rows), Some(st.s), Vec::new()),
        Err(Error::Undefined(rows)) => (None, None, rows),
        Err(e) => return Err(e),
    };
    Ok(StructureReport {
        exists: s.is_some(),
        structured: s.map(|v| v >= STRUCTURED_THRESHOLD),
        s_rows,
        s,
        undefined_rows,
        semiconvergent: check_semiconvergent(&system.a, DEFAULT_SPECTRAL_TOL),
        controllable: check_controllable(&system.a, &system.b, DEFAULT_RANK_TOL),
        flow_converged: seq.converged,
        truncation_k: seq.truncation_k,
        gamma,
    })
}

/// System in the coordinates `[x; u] = diag(scale) [x̄; ū]`.
pub fn diagonal_transform(system: &LtiSystem, scale: &DVector<f64>) -> Result<LtiSystem> {
    let (nx, nu) = (system.nx(), system.nu());
    if scale.len() != nx + nu {
        return Err(Error::DimensionMismatch(format!("transform has {} entries, expected {}", scale.len(), nx + nu)));
    }
    if let Some(i) = scale.iter().position(|&v| v == 0.0) {
        return Err(Error::ZeroScale(i));
    }
    let a = DMatrix::from_fn(nx, nx, |i, j| system.a[(i, j)] * scale[j] / scale[i]);
    let b = DMatrix::from_fn(nx, nu, |i, j| system.b[(i, j)] * scale[nx + j] / scale[i]);
    LtiSystem::new(a, b)
}

/// Input impulse of the transformed system that reproduces the unit impulse
/// of the original one.
pub fn transformed_impulse(scale: &DVector<f64>, nx: usize) -> DVector<f64> {
    scale.rows(nx, scale.len() - nx).map(|v| 1.0 / v)
}
