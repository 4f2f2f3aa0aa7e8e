use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::problem::{ConstraintSet, MpcProblem, PartitionedProblem, Trajectory};

/// Distance of a bound below which it is treated as active.
const ACTIVE_TOL: f64 = 1e-8;

/// First-order optimality residuals of a trajectory for the original MPC
/// problem with box (or no) constraints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KktResidual {
    /// `‖𝒬y + q + Cᵀν‖∞` over components strictly inside their bounds.
    pub stationarity: f64,
    /// Largest multiplier of the wrong sign on an active bound.
    pub sign: f64,
    /// `‖Cy − c‖∞`.
    pub dynamics: f64,
    /// Largest bound violation.
    pub bounds: f64,
}

impl KktResidual {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.sign).max(self.dynamics).max(self.bounds)
    }
}

fn bounds(set: &ConstraintSet, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    match set {
        ConstraintSet::Unbounded => Ok((vec![f64::NEG_INFINITY; n], vec![f64::INFINITY; n])),
        ConstraintSet::Box { lower, upper } => Ok((lower.iter().copied().collect(), upper.iter().copied().collect())),
        ConstraintSet::Custom(_) => Err(Error::InvalidConfig("KKT check supports box constraints only".into())),
    }
}

/// Evaluates the KKT conditions of the original problem at `traj`.
/// Multipliers of the dynamics are fitted by least squares over the
/// components that are not at a bound.
pub fn kkt_residual(problem: &MpcProblem, traj: &Trajectory) -> Result<KktResidual> {
    let pp = PartitionedProblem::conventional(problem)?;
    let s = &pp.subsystems[0];
    let y = pp.lift(traj);
    let n = y.len();
    let g = s.hessian() * &y + &s.q;

    let (xl, xu) = bounds(&s.xset, s.nx)?;
    let (ul, uu) = bounds(&s.uset, s.nu)?;
    let mut lo = vec![f64::NEG_INFINITY; n];
    let mut hi = vec![f64::INFINITY; n];
    for k in 0..pp.horizon {
        let (u, _, x) = s.stage_offsets(k);
        lo[u..u + s.nu].copy_from_slice(&ul);
        hi[u..u + s.nu].copy_from_slice(&uu);
        lo[x..x + s.nx].copy_from_slice(&xl);
        hi[x..x + s.nx].copy_from_slice(&xu);
    }
    let at_lo: Vec<bool> = (0..n).map(|j| lo[j].is_finite() && y[j] - lo[j] <= ACTIVE_TOL * lo[j].abs().max(1.0)).collect();
    let at_hi: Vec<bool> = (0..n).map(|j| hi[j].is_finite() && hi[j] - y[j] <= ACTIVE_TOL * hi[j].abs().max(1.0)).collect();
    let free: Vec<usize> = (0..n).filter(|&j| !at_lo[j] && !at_hi[j]).collect();

    let c = s.c_mat.to_dense();
    let rows = c.nrows();
    let nu = if free.is_empty() || rows == 0 {
        DVector::zeros(rows)
    } else {
        let ct_free = DMatrix::from_fn(free.len(), rows, |a, b| c[(b, free[a])]);
        let rhs = DVector::from_iterator(free.len(), free.iter().map(|&j| -g[j]));
        // normal equations when well posed, SVD for rank-deficient fits
        let normal = ct_free.tr_mul(&ct_free).cholesky().map(|ch| ch.solve(&ct_free.tr_mul(&rhs)));
        match normal {
            Some(v) if v.iter().all(|x| x.is_finite()) => v,
            _ => ct_free
                .svd(true, true)
                .solve(&rhs, 1e-12)
                .map_err(|e| Error::InvalidConfig(format!("least-squares multiplier fit failed: {e}")))?,
        }
    };
    let resid = &g + c.transpose() * &nu;

    let stationarity = free.iter().map(|&j| resid[j].abs()).fold(0.0, f64::max);
    let mut sign = 0.0f64;
    for j in 0..n {
        match (at_lo[j], at_hi[j]) {
            (true, false) => sign = sign.max(-resid[j]),
            (false, true) => sign = sign.max(resid[j]),
            _ => {}
        }
    }
    let bounds = (0..n).map(|j| (lo[j] - y[j]).max(y[j] - hi[j]).max(0.0)).fold(0.0, f64::max);
    Ok(KktResidual { stationarity, sign, dynamics: problem.dynamics_residual(traj), bounds })
}
