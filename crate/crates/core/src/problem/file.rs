use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{ConstraintSet, LtiSystem, MpcProblem, Partition};
use crate::error::{Error, Result};
use crate::linalg::{from_rows, to_rows};

/// Box bounds on disk; `null` encodes an infinite bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsFile {
    pub lower: Vec<Option<f64>>,
    pub upper: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionFile {
    pub xdims: Vec<usize>,
    pub udims: Vec<usize>,
}

/// JSON problem format. Matrices are row-major nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemFile {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "N")]
    pub horizon: usize,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
    pub r_x: Vec<Vec<f64>>,
    pub r_u: Vec<Vec<f64>>,
    pub x1: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xbounds: Option<BoundsFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ubounds: Option<BoundsFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionFile>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

fn bounds_to_file(set: &ConstraintSet) -> Result<Option<BoundsFile>> {
    let enc = |v: f64| if v.is_finite() { Some(v) } else { None };
    match set {
        ConstraintSet::Unbounded => Ok(None),
        ConstraintSet::Box { lower, upper } => Ok(Some(BoundsFile {
            lower: lower.iter().map(|&v| enc(v)).collect(),
            upper: upper.iter().map(|&v| enc(v)).collect(),
        })),
        ConstraintSet::Custom(_) => Err(Error::InvalidConfig("custom constraint sets cannot be written to a problem file".into())),
    }
}

fn bounds_from_file(b: &Option<BoundsFile>, n: usize, name: &str) -> Result<ConstraintSet> {
    let Some(b) = b else { return Ok(ConstraintSet::Unbounded) };
    if b.lower.len() != n || b.upper.len() != n {
        return Err(Error::DimensionMismatch(format!("{name} has {} / {} entries, expected {n}", b.lower.len(), b.upper.len())));
    }
    let lower = DVector::from_iterator(n, b.lower.iter().map(|v| v.unwrap_or(f64::NEG_INFINITY)));
    let upper = DVector::from_iterator(n, b.upper.iter().map(|v| v.unwrap_or(f64::INFINITY)));
    ConstraintSet::new_box(lower, upper)
}

fn matrix(rows: &[Vec<f64>], ncols_if_empty: usize, name: &str) -> Result<DMatrix<f64>> {
    from_rows(rows, ncols_if_empty).ok_or_else(|| Error::DimensionMismatch(format!("{name} has rows of different length")))
}

impl ProblemFile {
    pub fn from_problem(problem: &MpcProblem, partition: Option<&Partition>) -> Result<Self> {
        let vecs = |v: &[DVector<f64>]| v.iter().map(|x| x.iter().copied().collect()).collect();
        Ok(ProblemFile {
            a: to_rows(&problem.system.a),
            b: to_rows(&problem.system.b),
            horizon: problem.horizon,
            q: to_rows(&problem.q),
            r: to_rows(&problem.r),
            r_x: vecs(&problem.r_x),
            r_u: vecs(&problem.r_u),
            x1: problem.x1.iter().copied().collect(),
            xbounds: bounds_to_file(&problem.xset)?,
            ubounds: bounds_to_file(&problem.uset)?,
            partition: partition.map(|p| PartitionFile { xdims: p.xdims.clone(), udims: p.udims.clone() }),
            metadata: BTreeMap::new(),
        })
    }

    /// Validates dimensions and builds the problem (and partition, if present).
    pub fn to_problem(&self) -> Result<(MpcProblem, Option<Partition>)> {
        let a = matrix(&self.a, 0, "A")?;
        let b = matrix(&self.b, 0, "B")?;
        let b = if b.nrows() == 0 { DMatrix::zeros(a.nrows(), 0) } else { b };
        let system = LtiSystem::new(a, b)?;
        let (nx, nu) = (system.nx(), system.nu());
        let q = matrix(&self.q, nx, "Q")?;
        let r = if self.r.is_empty() { DMatrix::zeros(0, 0) } else { matrix(&self.r, nu, "R")? };
        let dv = |v: &Vec<f64>| DVector::from_column_slice(v);
        let problem = MpcProblem::new(
            system,
            self.horizon,
            q,
            r,
            self.r_x.iter().map(dv).collect(),
            self.r_u.iter().map(dv).collect(),
            dv(&self.x1),
            bounds_from_file(&self.xbounds, nx, "xbounds")?,
            bounds_from_file(&self.ubounds, nu, "ubounds")?,
        )?;
        let partition = match &self.partition {
            Some(p) => {
                let p = Partition::new(p.xdims.clone(), p.udims.clone())?;
                p.check_system(&problem.system)?;
                Some(p)
            }
            None => None,
        };
        Ok((problem, partition))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
