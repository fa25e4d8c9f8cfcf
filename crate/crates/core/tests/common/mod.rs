#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::BTreeSet;

use aoi_observer::lti::LtiSystem;
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Rank by Gaussian elimination with full pivoting.
pub fn rank_oracle(m: &DMatrix<f64>) -> usize {
    let mut a = m.clone();
    let (rows, cols) = a.shape();
    let scale = a.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    if scale == 0.0 {
        return 0;
    }
    let tol = 1e-9 * scale * rows.max(cols) as f64;
    let mut rank = 0;
    for step in 0..rows.min(cols) {
        let mut best = (step, step, 0.0);
        for r in step..rows {
            for c in step..cols {
                if a[(r, c)].abs() > best.2 {
                    best = (r, c, a[(r, c)].abs());
                }
            }
        }
        if best.2 <= tol {
            break;
        }
        a.swap_rows(step, best.0);
        a.swap_columns(step, best.1);
        for r in step + 1..rows {
            let factor = a[(r, step)] / a[(step, step)];
            for c in step..cols {
                let v = a[(step, c)];
                a[(r, c)] -= factor * v;
            }
        }
        rank += 1;
    }
    rank
}

/// `[C; CA; ...; CA^(n−1)]` by repeated multiplication.
pub fn obs_oracle(a: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let p = c.nrows();
    let mut out = DMatrix::zeros(p * n, n);
    let mut row = c.clone();
    for k in 0..n {
        out.view_mut((k * p, 0), (p, n)).copy_from(&row);
        row = &row * a;
    }
    out
}

pub fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    gaussian(rng, n, n).qr().q()
}

/// Lower block-triangular plant with known block sizes, rotated by a
/// random orthogonal matrix. Node j sees its own block through one random
/// row plus random weights on earlier blocks.
pub fn structured_system(rng: &mut ChaCha8Rng, dims: &[usize]) -> LtiSystem {
    let n: usize = dims.iter().sum();
    let offsets: Vec<usize> = dims
        .iter()
        .scan(0, |acc, &d| {
            let o = *acc;
            *acc += d;
            Some(o)
        })
        .collect();
    let mut a_bar = DMatrix::zeros(n, n);
    for (j, &dj) in dims.iter().enumerate() {
        if dj == 0 {
            continue;
        }
        let diag = gaussian(rng, dj, dj) * (1.0 / (dj as f64).sqrt());
        a_bar.view_mut((offsets[j], offsets[j]), (dj, dj)).copy_from(&diag);
        for q in 0..j {
            if dims[q] > 0 {
                let block = gaussian(rng, dj, dims[q]) * 0.3;
                a_bar.view_mut((offsets[j], offsets[q]), (dj, dims[q])).copy_from(&block);
            }
        }
    }
    let c_bar: Vec<DMatrix<f64>> = dims
        .iter()
        .enumerate()
        .map(|(j, &dj)| {
            let mut row = DMatrix::zeros(1, n);
            let upto = offsets[j] + dj;
            for c in 0..upto {
                row[(0, c)] = rng.sample::<f64, _>(StandardNormal);
            }
            row
        })
        .collect();
    let q = orthogonal(rng, n);
    let a = &q * a_bar * q.transpose();
    let c = c_bar.iter().map(|cb| cb * q.transpose()).collect();
    LtiSystem::new(a, c).expect("structured plant is jointly observable")
}

/// Random split of `n` into `parts` non-negative sizes.
pub fn random_dims(rng: &mut ChaCha8Rng, n: usize, parts: usize) -> Vec<usize> {
    let mut dims = vec![0; parts];
    for _ in 0..n {
        dims[rng.random_range(0..parts)] += 1;
    }
    dims
}

/// Strong connectivity from the transitive closure of `I + adjacency`,
/// computed by boolean matrix squaring.
pub fn sc_oracle(edges: &BTreeSet<(usize, usize)>, n: usize) -> bool {
    let mut reach = vec![vec![false; n]; n];
    for (i, row) in reach.iter_mut().enumerate() {
        row[i] = true;
    }
    for &(i, j) in edges {
        reach[i][j] = true;
    }
    let mut steps = 1;
    while steps < n {
        let mut next = reach.clone();
        for i in 0..n {
            for k in 0..n {
                if reach[i][k] {
                    for j in 0..n {
                        if reach[k][j] {
                            next[i][j] = true;
                        }
                    }
                }
            }
        }
        reach = next;
        steps *= 2;
    }
    reach.iter().all(|row| row.iter().all(|&b| b))
}

/// Definition-literal check: every non-empty subset of `V∖S`, listed by
/// counting in binary, has a member with at least `r` distinct in-neighbors
/// outside the subset.
pub fn robust_oracle(edges: &[(usize, usize)], n: usize, sources: &[usize], r: usize) -> bool {
    let rest: Vec<usize> = (0..n).filter(|i| !sources.contains(i)).collect();
    for mask in 1u32..(1u32 << rest.len()) {
        let subset: Vec<usize> = (0..rest.len()).filter(|b| mask >> b & 1 == 1).map(|b| rest[b]).collect();
        let reachable = subset.iter().any(|&i| {
            let outside: BTreeSet<usize> = edges
                .iter()
                .filter(|&&(from, to)| to == i && from != to && !subset.contains(&from))
                .map(|&(from, _)| from)
                .collect();
            outside.len() >= r
        });
        if !reachable {
            return false;
        }
    }
    true
}

pub fn random_edges(rng: &mut ChaCha8Rng, n: usize, p: f64) -> BTreeSet<(usize, usize)> {
    let mut e = BTreeSet::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && rng.random_bool(p) {
                e.insert((i, j));
            }
        }
    }
    e
}
