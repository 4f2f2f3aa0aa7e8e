//! Worst-case-optimal subsystem penalties from the projected Hessians.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::problem::PartitionedProblem;

/// Smallest eigenvalue of `ZᵀQZ` accepted as positive definite.
pub const PD_TOL: f64 = 1e-12;
/// Penalty used when the projected Hessian is only semidefinite.
pub const FALLBACK_RHO: f64 = 1.0;
const RANK_TOL: f64 = 1e-10;

/// Orthonormal basis of `null(C)`.
#[derive(Debug, Clone)]
pub struct NullBasis {
    pub z: DMatrix<f64>,
}

/// Null space of a full-row-rank `C` via the QR factorization of `[Cᵀ | I]`:
/// the first `rows(C)` columns of `Q` span `range(Cᵀ)`, the rest its
/// orthogonal complement.
pub fn null_space_basis(c: &DMatrix<f64>) -> Result<NullBasis> {
    let (r, n) = (c.nrows(), c.ncols());
    if r > n {
        return Err(Error::RankDefect { rank: n, expected: r });
    }
    let mut aug = DMatrix::zeros(n, r + n);
    aug.view_mut((0, 0), (n, r)).copy_from(&c.transpose());
    aug.view_mut((0, r), (n, n)).fill_with_identity();
    let qr = aug.qr();
    let rm = qr.r();
    let scale = c.amax().max(f64::MIN_POSITIVE);
    let rank = (0..r).filter(|&j| rm[(j, j)].abs() > RANK_TOL * scale).count();
    if rank < r {
        return Err(Error::RankDefect { rank, expected: r });
    }
    let q = qr.q();
    Ok(NullBasis { z: q.columns(r, n - r).into_owned() })
}

/// `Zᵀ𝒬Z`, symmetrized.
pub fn projected_hessian(hessian: &DMatrix<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
    let h = z.transpose() * hessian * z;
    (&h + h.transpose()) * 0.5
}

fn spectrum(h: &DMatrix<f64>) -> (f64, f64) {
    if h.nrows() == 0 {
        return (0.0, 0.0);
    }
    let e = h.symmetric_eigenvalues();
    (e.min(), e.max())
}

/// `√(eig_min · eig_max)` of `Zᵀ𝒬Z`. There is no `β` argument: the optimum
/// does not depend on it.
pub fn optimal_rho(hessian: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<f64> {
    let (lo, hi) = spectrum(&projected_hessian(hessian, z));
    if !(lo > PD_TOL) {
        return Err(Error::NotPositiveDefinite(lo));
    }
    Ok((lo * hi).sqrt())
}

/// `‖(Zᵀ(𝒬/ρ + I)Z)⁻¹ − ½I‖₂`, the quantity the optimal penalty minimizes.
pub fn contraction_norm(rho: f64, hessian: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<f64> {
    if !(rho > 0.0) {
        return Err(Error::InvalidConfig(format!("penalty {rho} is not positive")));
    }
    let k = z.transpose() * (hessian / rho) * z + DMatrix::identity(z.ncols(), z.ncols());
    let k = (&k + k.transpose()) * 0.5;
    let kinv = k.try_inverse().ok_or(Error::NotPositiveDefinite(0.0))?;
    let m = kinv - DMatrix::identity(z.ncols(), z.ncols()) * 0.5;
    let m = (&m + m.transpose()) * 0.5;
    Ok(m.symmetric_eigenvalues().iter().fold(0.0f64, |a, v| a.max(v.abs())))
}

#[derive(Debug, Clone, Serialize)]
pub struct SubsystemPenalty {
    pub eig_min: f64,
    pub eig_max: f64,
    pub positive_definite: bool,
    /// `None` when the projected Hessian is not positive definite.
    pub rho_star: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PenaltyReport {
    pub subsystems: Vec<SubsystemPenalty>,
}

impl PenaltyReport {
    /// Optimal penalties, with [`FALLBACK_RHO`] where undefined.
    pub fn rho(&self) -> Vec<f64> {
        self.subsystems.iter().map(|s| s.rho_star.unwrap_or(FALLBACK_RHO)).collect()
    }

    pub fn all_defined(&self) -> bool {
        self.subsystems.iter().all(|s| s.positive_definite)
    }
}

pub fn penalty_report(pp: &PartitionedProblem) -> Result<PenaltyReport> {
    let mut subsystems = Vec::with_capacity(pp.m());
    for s in &pp.subsystems {
        let z = null_space_basis(&s.c_mat.to_dense())?.z;
        let (eig_min, eig_max) = spectrum(&projected_hessian(&s.hessian(), &z));
        let pd = eig_min > PD_TOL;
        subsystems.push(SubsystemPenalty {
            eig_min,
            eig_max,
            positive_definite: pd,
            rho_star: pd.then(|| (eig_min * eig_max).sqrt()),
        });
    }
    Ok(PenaltyReport { subsystems })
}
