//! Dense linear-algebra helpers shared by the design and decomposition code.

use nalgebra::{Complex, DMatrix, DVector};

/// Relative factor in the numerical rank threshold.
pub const RANK_REL_TOL: f64 = 1e-9;
/// Minimum ratio between the last kept and first dropped singular value.
pub const RANK_GAP_RATIO: f64 = 1e3;

/// Outcome of a numerical rank decision.
#[derive(Debug, Clone)]
pub struct RankDecision {
    pub rank: usize,
    /// Singular values, descending.
    pub singular_values: Vec<f64>,
    pub threshold: f64,
    /// Ratio at the cut. Infinite when nothing sits below the cut.
    pub gap: f64,
}

impl RankDecision {
    pub fn is_ambiguous(&self) -> bool {
        self.gap < RANK_GAP_RATIO
    }
}

/// Orthonormal split of the input space of a matrix into its row space and
/// null space.
#[derive(Debug, Clone)]
pub struct SubspaceSplit {
    pub decision: RankDecision,
    /// cols × rank
    pub range: DMatrix<f64>,
    /// cols × (cols − rank)
    pub null: DMatrix<f64>,
}

/// Full SVD of `m` with a complete right basis. Rows are zero-padded when
/// `m` is wide so that the null space is returned as well.
fn full_right_svd(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let (r, c) = m.shape();
    if c == 0 {
        return (Vec::new(), DMatrix::zeros(0, 0));
    }
    let padded = if r < c {
        let mut p = DMatrix::zeros(c, c);
        p.view_mut((0, 0), (r, c)).copy_from(m);
        p
    } else {
        m.clone()
    };
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("requested v_t");
    let sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let mut v = DMatrix::zeros(c, c);
    let mut sorted = Vec::with_capacity(c);
    for (dst, &src) in order.iter().enumerate() {
        sorted.push(sv[src]);
        for row in 0..c {
            v[(row, dst)] = v_t[(src, row)];
        }
    }
    (sorted, v)
}

pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut sv: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Largest singular value; 0 for empty matrices.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    singular_values(m).first().copied().unwrap_or(0.0)
}

fn decide(sv: &[f64], dims_max: usize, scale: Option<f64>) -> RankDecision {
    let smax = sv.first().copied().unwrap_or(0.0);
    let reference = scale.unwrap_or(smax).max(smax);
    let threshold = RANK_REL_TOL * reference * dims_max as f64;
    let rank = if reference == 0.0 {
        0
    } else {
        sv.iter().filter(|&&s| s > threshold).count()
    };
    let upper = if rank == 0 { reference } else { sv[rank - 1] };
    let lower = sv.get(rank).copied().unwrap_or(0.0);
    let gap = if lower == 0.0 { f64::INFINITY } else { upper / lower };
    RankDecision {
        rank,
        singular_values: sv.to_vec(),
        threshold,
        gap,
    }
}

/// Numerical rank with threshold `1e-9 · σ_ref · max(dims)`, where `σ_ref`
/// is `scale` when given (and larger than σ_max) and σ_max otherwise.
pub fn rank_decision(m: &DMatrix<f64>, scale: Option<f64>) -> RankDecision {
    let sv = singular_values(m);
    decide(&sv, m.nrows().max(m.ncols()), scale)
}

pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    rank_decision(m, None).rank
}

/// Row-space / null-space split of `m` under the same rank rule.
pub fn split_subspaces(m: &DMatrix<f64>, scale: Option<f64>) -> SubspaceSplit {
    let c = m.ncols();
    let (sv, v) = full_right_svd(m);
    let decision = decide(&sv, m.nrows().max(c), scale);
    let r = decision.rank;
    SubspaceSplit {
        range: v.columns(0, r).into_owned(),
        null: v.columns(r, c - r).into_owned(),
        decision,
    }
}

pub fn complex_eigenvalues(m: &DMatrix<f64>) -> Vec<Complex<f64>> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    m.complex_eigenvalues().iter().copied().collect()
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    complex_eigenvalues(m)
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// `m^p` by repeated squaring.
pub fn matrix_power(m: &DMatrix<f64>, mut p: u64) -> DMatrix<f64> {
    let n = m.nrows();
    let mut result = DMatrix::identity(n, n);
    let mut base = m.clone();
    while p > 0 {
        if p & 1 == 1 {
            result = &result * &base;
        }
        p >>= 1;
        if p > 0 {
            base = &base * &base;
        }
    }
    result
}

/// Concatenate matrices side by side. All inputs must share a row count.
pub fn hstack(rows: usize, parts: &[DMatrix<f64>]) -> DMatrix<f64> {
    let cols: usize = parts.iter().map(|p| p.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut at = 0;
    for p in parts {
        out.view_mut((0, at), (rows, p.ncols())).copy_from(p);
        at += p.ncols();
    }
    out
}

/// Stack matrices vertically. All inputs must share a column count.
pub fn vstack(cols: usize, parts: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = parts.iter().map(|p| p.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut at = 0;
    for p in parts {
        out.view_mut((at, 0), (p.nrows(), cols)).copy_from(p);
        at += p.nrows();
    }
    out
}

pub fn concat_vectors(parts: &[DVector<f64>]) -> DVector<f64> {
    let n: usize = parts.iter().map(|p| p.len()).sum();
    let mut out = DVector::zeros(n);
    let mut at = 0;
    for p in parts {
        out.rows_mut(at, p.len()).copy_from(p);
        at += p.len();
    }
    out
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}
