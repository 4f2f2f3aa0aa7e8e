use nalgebra::DMatrix;

use super::{LtiSystem, Partition};
use crate::error::Result;
use crate::linalg::range_basis;

/// Singular values below this fraction of the largest are dropped when
/// forming the virtual-input bases.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Internal/external split of `[A, B]` under a partition, with orthonormal
/// bases `W_i` of the external flow into each subsystem.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub partition: Partition,
    pub aint: DMatrix<f64>,
    pub aext: DMatrix<f64>,
    pub bint: DMatrix<f64>,
    pub bext: DMatrix<f64>,
    pub w: Vec<DMatrix<f64>>,
    pub wdims: Vec<usize>,
    /// Every subsystem drives at most one other subsystem's virtual input.
    pub out1: bool,
    pub rank_tol: f64,
}

impl Decomposition {
    pub fn m(&self) -> usize {
        self.wdims.len()
    }

    pub fn w_total(&self) -> usize {
        self.wdims.iter().sum()
    }

    /// `A_ij` block.
    pub fn a_block(&self, i: usize, j: usize) -> DMatrix<f64> {
        let (xo, p) = (self.partition.x_offsets(), &self.partition);
        let full = if i == j { &self.aint } else { &self.aext };
        full.view((xo[i], xo[j]), (p.xdims[i], p.xdims[j])).into_owned()
    }

    /// `B_ij` block.
    pub fn b_block(&self, i: usize, j: usize) -> DMatrix<f64> {
        let (xo, uo, p) = (self.partition.x_offsets(), self.partition.u_offsets(), &self.partition);
        let full = if i == j { &self.bint } else { &self.bext };
        full.view((xo[i], uo[j]), (p.xdims[i], p.udims[j])).into_owned()
    }

    /// Rows of `[Aext, Bext]` belonging to subsystem `i`.
    pub fn external_rows(&self, i: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let xo = self.partition.x_offsets();
        let n = self.partition.xdims[i];
        (
            self.aext.rows(xo[i], n).into_owned(),
            self.bext.rows(xo[i], n).into_owned(),
        )
    }
}

pub fn decompose(system: &LtiSystem, partition: &Partition, rank_tol: f64) -> Result<Decomposition> {
    partition.check_system(system)?;
    let m = partition.m();
    let xo = partition.x_offsets();
    let xown = partition.state_owner();
    let uown = partition.input_owner();
    let (nx, nu) = (system.nx(), system.nu());

    let mut aint = DMatrix::zeros(nx, nx);
    let mut aext = DMatrix::zeros(nx, nx);
    for r in 0..nx {
        for c in 0..nx {
            if xown[r] == xown[c] {
                aint[(r, c)] = system.a[(r, c)];
            } else {
                aext[(r, c)] = system.a[(r, c)];
            }
        }
    }
    let mut bint = DMatrix::zeros(nx, nu);
    let mut bext = DMatrix::zeros(nx, nu);
    for r in 0..nx {
        for c in 0..nu {
            if xown[r] == uown[c] {
                bint[(r, c)] = system.b[(r, c)];
            } else {
                bext[(r, c)] = system.b[(r, c)];
            }
        }
    }

    let mut w = Vec::with_capacity(m);
    for i in 0..m {
        let rows = partition.xdims[i];
        let mut cat = DMatrix::zeros(rows, nx + nu);
        cat.view_mut((0, 0), (rows, nx)).copy_from(&aext.rows(xo[i], rows));
        cat.view_mut((0, nx), (rows, nu)).copy_from(&bext.rows(xo[i], rows));
        w.push(range_basis(&cat, rank_tol));
    }
    let wdims: Vec<usize> = w.iter().map(|b| b.ncols()).collect();

    // out1: the columns owned by each subsystem reach at most one other row block
    let mut targets = vec![Vec::<usize>::new(); m];
    for r in 0..nx {
        for c in 0..nx {
            if aext[(r, c)] != 0.0 && !targets[xown[c]].contains(&xown[r]) {
                targets[xown[c]].push(xown[r]);
            }
        }
        for c in 0..nu {
            if bext[(r, c)] != 0.0 && !targets[uown[c]].contains(&xown[r]) {
                targets[uown[c]].push(xown[r]);
            }
        }
    }
    let out1 = targets.iter().all(|t| t.len() <= 1);

    Ok(Decomposition { partition: partition.clone(), aint, aext, bint, bext, w, wdims, out1, rank_tol })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_diagonal_has_no_virtual_inputs() {
        let a = DMatrix::from_row_slice(3, 3, &[0.5, 0.1, 0.0, 0.2, 0.3, 0.0, 0.0, 0.0, 0.4]);
        let b = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let sys = LtiSystem::new(a.clone(), b.clone()).unwrap();
        let p = Partition::new(vec![2, 1], vec![1, 1]).unwrap();
        let d = decompose(&sys, &p, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(d.wdims, vec![0, 0]);
        assert_eq!(d.aext, DMatrix::zeros(3, 3));
        assert_eq!(&d.aint + &d.aext, a);
        assert_eq!(&d.bint + &d.bext, b);
        assert!(d.out1);
    }

    #[test]
    fn all_half_example_has_unit_virtual_inputs() {
        let sys = LtiSystem::new(DMatrix::from_element(2, 2, 0.5), DMatrix::from_element(2, 1, 1.0)).unwrap();
        let p = Partition::new(vec![1, 1], vec![1, 0]).unwrap();
        let d = decompose(&sys, &p, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(d.wdims, vec![1, 1]);
        for wi in &d.w {
            assert!((wi.transpose() * wi - DMatrix::identity(wi.ncols(), wi.ncols())).amax() < 1e-12);
        }
        assert_eq!(d.b_block(1, 0), DMatrix::from_element(1, 1, 1.0));
        assert_eq!(d.a_block(0, 1), DMatrix::from_element(1, 1, 0.5));
    }

    #[test]
    fn two_targets_break_out1() {
        // subsystem 0 drives both 1 and 2
        let a = DMatrix::from_row_slice(3, 3, &[0.5, 0.0, 0.0, 0.3, 0.5, 0.0, 0.2, 0.0, 0.5]);
        let sys = LtiSystem::new(a, DMatrix::identity(3, 3)).unwrap();
        let p = Partition::new(vec![1, 1, 1], vec![1, 1, 1]).unwrap();
        let d = decompose(&sys, &p, DEFAULT_RANK_TOL).unwrap();
        assert!(!d.out1);
        assert_eq!(d.wdims, vec![0, 1, 1]);
    }
}
