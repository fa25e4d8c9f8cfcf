//! Plant and measurement model, observability, and the multi-sensor
//! decomposition into sub-states.
//!
//! `decompose` peels off, node by node, the directions of the state space
//! that node j observes but nodes 0..j do not. In the resulting coordinates
//! `z = T⁻¹x` the system matrix is block lower-triangular and node j sees
//! its own diagonal block through an observable pair.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, split_subspaces};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LtiError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("system has no nodes")]
    NoNodes,
    #[error("matrix entries must be finite")]
    NonFinite,
    #[error("the pair (A, stacked C) is not observable")]
    NotJointlyObservable,
    #[error("numerical rank ambiguous at node {node}: singular value gap {gap:.3e} below separation threshold")]
    NumericalRankAmbiguity { node: usize, gap: f64 },
}

/// Plant `x[k+1] = A x[k]` with per-node measurements `y_i[k] = C_i x[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtiSystem {
    a: DMatrix<f64>,
    c: Vec<DMatrix<f64>>,
    labels: Option<Vec<String>>,
}

impl LtiSystem {
    pub fn new(a: DMatrix<f64>, c: Vec<DMatrix<f64>>) -> Result<Self, LtiError> {
        if !a.is_square() {
            return Err(LtiError::DimensionMismatch(format!(
                "A is {}x{}, expected square",
                a.nrows(),
                a.ncols()
            )));
        }
        if a.nrows() == 0 {
            return Err(LtiError::DimensionMismatch("state dimension is zero".into()));
        }
        if c.is_empty() {
            return Err(LtiError::NoNodes);
        }
        let n = a.nrows();
        for (i, ci) in c.iter().enumerate() {
            if ci.ncols() != n {
                return Err(LtiError::DimensionMismatch(format!(
                    "C_{i} has {} columns, expected {n}",
                    ci.ncols()
                )));
            }
        }
        if !linalg::all_finite(&a) || !c.iter().all(linalg::all_finite) {
            return Err(LtiError::NonFinite);
        }
        let stacked = linalg::vstack(n, &c);
        if !is_observable(&a, &stacked)? {
            return Err(LtiError::NotJointlyObservable);
        }
        Ok(Self { a, c, labels: None })
    }

    /// Scalar plant `x[k+1] = a x[k]` with scalar gains `c_i`.
    pub fn scalar(a: f64, c: &[f64]) -> Result<Self, LtiError> {
        Self::new(
            DMatrix::from_element(1, 1, a),
            c.iter().map(|&ci| DMatrix::from_element(1, 1, ci)).collect(),
        )
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self, LtiError> {
        if labels.len() != self.c.len() {
            return Err(LtiError::DimensionMismatch(format!(
                "{} labels for {} nodes",
                labels.len(),
                self.c.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn c(&self, i: usize) -> &DMatrix<f64> {
        &self.c[i]
    }

    pub fn c_all(&self) -> &[DMatrix<f64>] {
        &self.c
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn node_count(&self) -> usize {
        self.c.len()
    }

    pub fn stacked_c(&self) -> DMatrix<f64> {
        linalg::vstack(self.state_dim(), &self.c)
    }

    pub fn measure(&self, i: usize, x: &DVector<f64>) -> DVector<f64> {
        &self.c[i] * x
    }
}

/// Rows `C, CA, ..., CA^(n-1)` stacked.
pub fn observability_matrix(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>, LtiError> {
    if !a.is_square() {
        return Err(LtiError::DimensionMismatch("A must be square".into()));
    }
    let n = a.nrows();
    if c.ncols() != n {
        return Err(LtiError::DimensionMismatch(format!(
            "C has {} columns, A is {n}x{n}",
            c.ncols()
        )));
    }
    let m = c.nrows();
    let mut out = DMatrix::zeros(m * n, n);
    let mut block = c.clone();
    for p in 0..n {
        out.view_mut((p * m, 0), (m, n)).copy_from(&block);
        if p + 1 < n {
            block = &block * a;
        }
    }
    Ok(out)
}

pub fn is_observable(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<bool, LtiError> {
    let o = observability_matrix(a, c)?;
    Ok(linalg::numerical_rank(&o) == a.nrows())
}

/// Coordinates in which the plant is block lower-triangular, one block
/// (sub-state) per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    t: DMatrix<f64>,
    t_inv: DMatrix<f64>,
    block_dims: Vec<usize>,
    offsets: Vec<usize>,
    a_bar: DMatrix<f64>,
    c_bar: Vec<DMatrix<f64>>,
}

impl Decomposition {
    pub fn t(&self) -> &DMatrix<f64> {
        &self.t
    }

    pub fn t_inv(&self) -> &DMatrix<f64> {
        &self.t_inv
    }

    pub fn block_dims(&self) -> &[usize] {
        &self.block_dims
    }

    pub fn state_dim(&self) -> usize {
        self.t.nrows()
    }

    pub fn node_count(&self) -> usize {
        self.block_dims.len()
    }

    pub fn offset(&self, j: usize) -> usize {
        self.offsets[j]
    }

    pub fn a_bar(&self) -> &DMatrix<f64> {
        &self.a_bar
    }

    pub fn c_bar(&self, i: usize) -> &DMatrix<f64> {
        &self.c_bar[i]
    }

    /// Node j is the source for sub-state j exactly when that block is non-empty.
    pub fn is_source(&self, j: usize) -> bool {
        self.block_dims[j] > 0
    }

    pub fn nonempty_blocks(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.block_dims.len()).filter(|&j| self.block_dims[j] > 0)
    }

    /// `A_jq`, of shape `n_j × n_q`.
    pub fn a_block(&self, j: usize, q: usize) -> DMatrix<f64> {
        self.a_bar
            .view((self.offsets[j], self.offsets[q]), (self.block_dims[j], self.block_dims[q]))
            .into_owned()
    }

    /// `C_iq`, the columns of `C̄_i` belonging to block q.
    pub fn c_block(&self, i: usize, q: usize) -> DMatrix<f64> {
        let ci = &self.c_bar[i];
        ci.view((0, self.offsets[q]), (ci.nrows(), self.block_dims[q])).into_owned()
    }

    /// `(A_jj, C_jj)`.
    pub fn diag_pair(&self, j: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.a_block(j, j), self.c_block(j, j))
    }

    pub fn to_substate(&self, x: &DVector<f64>) -> Result<SubStateVector, LtiError> {
        if x.len() != self.state_dim() {
            return Err(LtiError::DimensionMismatch(format!(
                "vector of length {}, state dimension {}",
                x.len(),
                self.state_dim()
            )));
        }
        let z = &self.t_inv * x;
        Ok(SubStateVector {
            blocks: (0..self.block_dims.len())
                .map(|j| z.rows(self.offsets[j], self.block_dims[j]).into_owned())
                .collect(),
        })
    }

    pub fn from_substate(&self, z: &SubStateVector) -> Result<DVector<f64>, LtiError> {
        if z.blocks.len() != self.block_dims.len()
            || z.blocks.iter().zip(&self.block_dims).any(|(b, &d)| b.len() != d)
        {
            return Err(LtiError::DimensionMismatch(
                "sub-state blocks do not match the decomposition".into(),
            ));
        }
        Ok(&self.t * z.concat())
    }
}

/// Sub-state blocks `z^(j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubStateVector {
    pub blocks: Vec<DVector<f64>>,
}

impl SubStateVector {
    pub fn concat(&self) -> DVector<f64> {
        linalg::concat_vectors(&self.blocks)
    }
}

/// Sequential decomposition. Starting from the whole space, node j claims
/// the part of the remaining subspace it can observe; what it cannot
/// observe is handed to node j+1.
pub fn decompose(sys: &LtiSystem) -> Result<Decomposition, LtiError> {
    let n = sys.state_dim();
    let a = sys.a();
    let mut remaining = DMatrix::<f64>::identity(n, n);
    let mut parts = Vec::with_capacity(sys.node_count());
    let mut block_dims = Vec::with_capacity(sys.node_count());

    for j in 0..sys.node_count() {
        if remaining.ncols() == 0 {
            block_dims.push(0);
            continue;
        }
        let o = observability_matrix(a, sys.c(j))?;
        // rank decisions on the restricted matrix are scaled by the
        // unrestricted one so roundoff leaking into a null direction is
        // judged against the full signal
        let scale = linalg::spectral_norm(&o);
        let restricted = &o * &remaining;
        let split = split_subspaces(&restricted, Some(scale));
        if split.decision.is_ambiguous() {
            return Err(LtiError::NumericalRankAmbiguity {
                node: j,
                gap: split.decision.gap,
            });
        }
        block_dims.push(split.decision.rank);
        parts.push(&remaining * &split.range);
        remaining = &remaining * &split.null;
    }
    if remaining.ncols() > 0 {
        return Err(LtiError::NotJointlyObservable);
    }

    let mut t = linalg::hstack(n, &parts);
    for col in 0..n {
        let mut pivot = 0.0f64;
        for row in 0..n {
            if t[(row, col)].abs() > pivot.abs() {
                pivot = t[(row, col)];
            }
        }
        if pivot < 0.0 {
            t.column_mut(col).neg_mut();
        }
    }
    let t_inv = t.transpose();

    let mut offsets = Vec::with_capacity(block_dims.len());
    let mut acc = 0;
    for &d in &block_dims {
        offsets.push(acc);
        acc += d;
    }

    let mut a_bar = &t_inv * a * &t;
    for (j, &dj) in block_dims.iter().enumerate() {
        let row_end = offsets[j] + dj;
        for row in offsets[j]..row_end {
            for col in row_end..n {
                a_bar[(row, col)] = 0.0;
            }
        }
    }
    let c_bar: Vec<DMatrix<f64>> = (0..sys.node_count())
        .map(|i| {
            let mut ci = sys.c(i) * &t;
            let end = offsets[i] + block_dims[i];
            for row in 0..ci.nrows() {
                for col in end..n {
                    ci[(row, col)] = 0.0;
                }
            }
            ci
        })
        .collect();

    Ok(Decomposition {
        t,
        t_inv,
        block_dims,
        offsets,
        a_bar,
        c_bar,
    })
}
