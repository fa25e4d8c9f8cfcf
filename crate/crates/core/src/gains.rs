//! Observer gain design: rate chains, pole placement, nilpotent gains,
//! norm-bound constants and finite-time deadlines.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::GraphSequence;
use crate::linalg;
use crate::lti::{observability_matrix, Decomposition, LtiError};

/// Steps enumerated when estimating norm constants.
pub const NORM_HORIZON: usize = 500;
/// Pole placement retries with fresh output combinations.
pub const PLACEMENT_RETRIES: usize = 16;
/// Shrink factor that makes the per-stage rate inequality strict.
pub const CHAIN_SHRINK: f64 = 0.999;
/// Tolerance on the placed spectral radius in rate mode.
pub const RATE_TOL: f64 = 1e-6;
/// Relative tolerance on `F^n` for nilpotent gains.
pub const NILPOTENT_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GainError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("rate chain underflows at sub-state {index}")]
    InfeasibleChain { index: usize },
    #[error("pole placement failed (residual {residual:.3e})")]
    PlacementFailed { residual: f64 },
    #[error("norm ratio still growing at step {horizon}")]
    HorizonInconclusive { horizon: usize },
    #[error("deadline not attained within horizon {horizon}")]
    HorizonTooShort { horizon: u64 },
    #[error("sub-state {0} has no gain")]
    MissingGain(usize),
    #[error(transparent)]
    Lti(#[from] LtiError),
}

/// Per-sub-state rates `ρ_j` and intermediate rates `λ_j` with
/// `ρ_1 < λ_1 < ρ_2 < ... < ρ_N < λ_N = ρ` and `γ^δ̄ ρ_j^(1−δ̄) ≤ λ_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateChain {
    pub rho: f64,
    pub delta: f64,
    pub delta_bar: f64,
    pub gamma: f64,
    pub rho_j: Vec<f64>,
    pub lambda_j: Vec<f64>,
}

impl RateChain {
    /// Both chain inequalities, checked directly.
    pub fn check(&self) -> bool {
        let n = self.rho_j.len();
        if n == 0 || self.lambda_j.len() != n || self.lambda_j[n - 1] != self.rho {
            return false;
        }
        for j in 0..n {
            if !(self.rho_j[j] > 0.0 && self.rho_j[j] < self.lambda_j[j]) {
                return false;
            }
            if j + 1 < n && self.lambda_j[j] >= self.rho_j[j + 1] {
                return false;
            }
            let lhs = self.gamma.powf(self.delta_bar) * self.rho_j[j].powf(1.0 - self.delta_bar);
            if lhs > self.lambda_j[j] {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GainMode {
    Rate,
    Nilpotent,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GainRequest {
    Rate { rho: f64, delta: f64 },
    Nilpotent,
}

/// `‖F_jj^k‖ ≤ α ρ_j^k` (rate mode only) and `‖A_jj^k‖ ≤ β γ_j^k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormConstants {
    pub alpha: Option<f64>,
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverGainSet {
    pub mode: GainMode,
    /// Indexed by sub-state; `None` for empty blocks.
    pub gains: Vec<Option<DMatrix<f64>>>,
    pub chain: Option<RateChain>,
    pub norm_constants: Vec<Option<NormConstants>>,
}

impl ObserverGainSet {
    pub fn gain(&self, j: usize) -> Result<&DMatrix<f64>, GainError> {
        self.gains
            .get(j)
            .and_then(|g| g.as_ref())
            .ok_or(GainError::MissingGain(j))
    }
}

pub fn delta_bar_for(delta: f64) -> f64 {
    if delta > 0.0 {
        (1.0 + delta) / 2.0
    } else {
        0.1
    }
}

/// `γ_j = max(1, 1.05·sr(A_jj))`.
pub fn growth_rate(a_jj: &DMatrix<f64>) -> f64 {
    (1.05 * linalg::spectral_radius(a_jj)).max(1.0)
}

pub fn build_rate_chain(dec: &Decomposition, rho: f64, delta: f64) -> Result<RateChain, GainError> {
    let gamma = dec
        .nonempty_blocks()
        .map(|j| growth_rate(&dec.a_block(j, j)))
        .fold(1.0, f64::max);
    build_rate_chain_with_gamma(dec.node_count(), gamma, rho, delta)
}

/// Chain over `count` sub-states, built from the last one down.
pub fn build_rate_chain_with_gamma(
    count: usize,
    gamma: f64,
    rho: f64,
    delta: f64,
) -> Result<RateChain, GainError> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(GainError::InvalidParameter(format!("rho = {rho} not in (0, 1)")));
    }
    if !(0.0..1.0).contains(&delta) {
        return Err(GainError::InvalidParameter(format!("delta = {delta} not in [0, 1)")));
    }
    if !(gamma >= 1.0 && gamma.is_finite()) {
        return Err(GainError::InvalidParameter(format!("gamma = {gamma} must be >= 1")));
    }
    if count == 0 {
        return Err(GainError::InvalidParameter("no sub-states".into()));
    }
    let delta_bar = delta_bar_for(delta);
    let shrink = 1.0 - 1.0 / (4.0 * count as f64);
    let mut rho_j = vec![0.0; count];
    let mut lambda_j = vec![0.0; count];
    lambda_j[count - 1] = rho;
    for j in (0..count).rev() {
        let r = CHAIN_SHRINK * (lambda_j[j] / gamma.powf(delta_bar)).powf(1.0 / (1.0 - delta_bar));
        if !(r > 1e-300) {
            return Err(GainError::InfeasibleChain { index: j });
        }
        rho_j[j] = r;
        if j > 0 {
            lambda_j[j - 1] = r * shrink;
        }
    }
    let chain = RateChain {
        rho,
        delta,
        delta_bar,
        gamma,
        rho_j,
        lambda_j,
    };
    if !chain.check() {
        return Err(GainError::InfeasibleChain { index: 0 });
    }
    Ok(chain)
}

fn characteristic_product(a: &DMatrix<f64>, roots: &[f64]) -> DMatrix<f64> {
    let n = a.nrows();
    let mut p = DMatrix::identity(n, n);
    for &t in roots {
        p = &p * (a - DMatrix::identity(n, n) * t);
    }
    p
}

/// Largest distance between the closed-loop spectrum and `targets`.
fn spectrum_residual(f: &DMatrix<f64>, targets: &[f64]) -> f64 {
    let eig = linalg::complex_eigenvalues(f);
    let mut got: Vec<_> = eig.iter().map(|z| (z.re, z.im)).collect();
    got.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut want = targets.to_vec();
    want.sort_by(|a, b| a.total_cmp(b));
    got.iter()
        .zip(&want)
        .map(|(&(re, im), &t)| ((re - t).powi(2) + im.powi(2)).sqrt())
        .fold(0.0, f64::max)
}

fn has_repeats(targets: &[f64]) -> bool {
    let mut t = targets.to_vec();
    t.sort_by(|a, b| a.total_cmp(b));
    t.windows(2).any(|w| (w[1] - w[0]).abs() <= 1e-12 * (1.0 + w[1].abs()))
}

/// Residual of `A − LC` against the requested spectrum. Distinct targets are
/// compared eigenvalue by eigenvalue. Repeated targets are checked through
/// `p(F) = 0`, since eigenvalues of a defective matrix are too sensitive to
/// compare directly.
pub fn placement_residual(a: &DMatrix<f64>, c: &DMatrix<f64>, l: &DMatrix<f64>, targets: &[f64]) -> f64 {
    let f = a - l * c;
    if has_repeats(targets) {
        let n = f.nrows() as i32;
        let scale = linalg::spectral_norm(&f).max(1.0).powi(n);
        linalg::spectral_norm(&characteristic_product(&f, targets)) / scale
    } else {
        spectrum_residual(&f, targets) / linalg::spectral_norm(a).max(1.0)
    }
}

/// Gain `L` (n×r) with spectrum of `A − LC` equal to the real `targets`.
/// Multi-output pairs are reduced to a single output through a seeded
/// random combination of the rows of `C`.
pub fn place_observer_poles(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    targets: &[f64],
    seed: u64,
    tol: f64,
) -> Result<DMatrix<f64>, GainError> {
    let n = a.nrows();
    let r = c.nrows();
    if !a.is_square() || c.ncols() != n {
        return Err(LtiError::DimensionMismatch("pair dimensions disagree".into()).into());
    }
    if targets.len() != n {
        return Err(GainError::InvalidParameter(format!(
            "{} targets for a block of dimension {n}",
            targets.len()
        )));
    }
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(GainError::InvalidParameter("non-finite target".into()));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, r));
    }
    if r == 0 {
        return Err(GainError::PlacementFailed { residual: f64::INFINITY });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = f64::INFINITY;
    let attempts = if r == 1 { 1 } else { PLACEMENT_RETRIES };
    for _ in 0..attempts {
        let v = if r == 1 {
            DVector::from_element(1, 1.0)
        } else {
            let raw: DVector<f64> = DVector::from_fn(r, |_, _| StandardNormal.sample(&mut rng));
            let norm = raw.norm();
            raw / norm
        };
        let cv = DMatrix::from_row_slice(1, n, (v.transpose() * c).as_slice());
        let o = observability_matrix(a, &cv)?;
        let mut e_n = DVector::zeros(n);
        e_n[n - 1] = 1.0;
        let Some(w) = o.lu().solve(&e_n) else { continue };
        let l_col = characteristic_product(a, targets) * w;
        let l = &l_col * v.transpose();
        if !linalg::all_finite(&l) {
            continue;
        }
        let res = placement_residual(a, c, &l, targets);
        if res <= tol {
            return Ok(l);
        }
        best = best.min(res);
    }
    Err(GainError::PlacementFailed { residual: best })
}

/// Equally spaced targets `ρ_j·m/n_j`, `m = 1..=n_j`.
pub fn rate_targets(rho_j: f64, n: usize) -> Vec<f64> {
    (1..=n).map(|m| rho_j * m as f64 / n as f64).collect()
}

/// Gain whose closed-loop eigenvalues are real, distinct and have
/// spectral radius `rho_j`.
pub fn design_rate_gain(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    rho_j: f64,
    seed: u64,
) -> Result<DMatrix<f64>, GainError> {
    if !(rho_j > 0.0 && rho_j < 1.0) {
        return Err(GainError::InvalidParameter(format!("rho_j = {rho_j} not in (0, 1)")));
    }
    let targets = rate_targets(rho_j, a.nrows());
    let l = place_observer_poles(a, c, &targets, seed, RATE_TOL * rho_j)?;
    let f = a - &l * c;
    let eig = linalg::complex_eigenvalues(&f);
    let sr = eig.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let mut re: Vec<f64> = eig.iter().map(|z| z.re).collect();
    re.sort_by(|a, b| a.total_cmp(b));
    let separated = re.windows(2).all(|w| w[1] - w[0] >= RATE_TOL * rho_j);
    let real = eig.iter().all(|z| z.im.abs() <= RATE_TOL * rho_j);
    if (sr - rho_j).abs() > RATE_TOL || !separated || !real {
        return Err(GainError::PlacementFailed {
            residual: (sr - rho_j).abs(),
        });
    }
    Ok(l)
}

/// Deadbeat gain: `(A − LC)^n = 0`.
pub fn design_nilpotent_gain(a: &DMatrix<f64>, c: &DMatrix<f64>, seed: u64) -> Result<DMatrix<f64>, GainError> {
    let targets = vec![0.0; a.nrows()];
    place_observer_poles(a, c, &targets, seed, NILPOTENT_TOL)
}

/// `‖F^n‖ / max(1, ‖F‖)^n`.
pub fn nilpotency_residual(f: &DMatrix<f64>) -> f64 {
    let n = f.nrows() as u64;
    let scale = linalg::spectral_norm(f).max(1.0).powi(n as i32);
    linalg::spectral_norm(&linalg::matrix_power(f, n)) / scale
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormCertificate {
    /// Ratio non-increasing over the last steps and below its peak.
    Decreasing,
    /// Ratio flat over the last steps (rate equal to the spectral radius).
    Converged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormBound {
    pub bound: f64,
    pub peak_step: usize,
    pub certificate: NormCertificate,
}

/// `max_k ‖M^k‖ / rate^k` over `k ≤ 500`, with a certificate that the
/// ratio has stopped growing.
pub fn estimate_norm_constants(m: &DMatrix<f64>, rate: f64) -> Result<NormBound, GainError> {
    if !m.is_square() {
        return Err(LtiError::DimensionMismatch("matrix must be square".into()).into());
    }
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(GainError::InvalidParameter(format!("rate = {rate} must be positive")));
    }
    let n = m.nrows();
    if n == 0 {
        return Ok(NormBound {
            bound: 1.0,
            peak_step: 0,
            certificate: NormCertificate::Decreasing,
        });
    }
    let scaled = m / rate;
    let mut pow = DMatrix::identity(n, n);
    let mut ratios = Vec::with_capacity(NORM_HORIZON + 1);
    ratios.push(1.0);
    for _ in 0..NORM_HORIZON {
        pow = &pow * &scaled;
        let r = linalg::spectral_norm(&pow);
        if !r.is_finite() {
            return Err(GainError::HorizonInconclusive { horizon: NORM_HORIZON });
        }
        ratios.push(r);
    }
    let (peak_step, bound) = ratios
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |acc, (k, r)| if r > acc.1 { (k, r) } else { acc });
    let tail = &ratios[NORM_HORIZON - 10..];
    let last = ratios[NORM_HORIZON];
    let decreasing = tail.windows(2).all(|w| w[1] <= w[0]) && last < bound;
    let converged = (last - tail[0]).abs() <= 1e-9 * last.max(f64::MIN_POSITIVE);
    let certificate = if decreasing {
        NormCertificate::Decreasing
    } else if converged {
        NormCertificate::Converged
    } else {
        return Err(GainError::HorizonInconclusive { horizon: NORM_HORIZON });
    };
    Ok(NormBound {
        bound,
        peak_step,
        certificate,
    })
}

/// Gains for every non-empty sub-state of `dec`.
pub fn design_gains(dec: &Decomposition, request: GainRequest, seed: u64) -> Result<ObserverGainSet, GainError> {
    let count = dec.node_count();
    let chain = match request {
        GainRequest::Rate { rho, delta } => Some(build_rate_chain(dec, rho, delta)?),
        GainRequest::Nilpotent => None,
    };
    let mut gains = vec![None; count];
    let mut norm_constants = vec![None; count];
    for j in dec.nonempty_blocks() {
        let (a, c) = dec.diag_pair(j);
        let block_seed = seed.wrapping_add(j as u64);
        let l = match &chain {
            Some(ch) => design_rate_gain(&a, &c, ch.rho_j[j], block_seed)?,
            None => design_nilpotent_gain(&a, &c, block_seed)?,
        };
        let gamma = growth_rate(&a);
        let beta = estimate_norm_constants(&a, gamma)?.bound;
        let alpha = match &chain {
            // small margin absorbs roundoff between this enumeration and
            // any later recomputation of the same powers
            Some(ch) => Some(estimate_norm_constants(&(&a - &l * &c), ch.rho_j[j])?.bound * (1.0 + 1e-9)),
            None => None,
        };
        norm_constants[j] = Some(NormConstants { alpha, beta, gamma });
        gains[j] = Some(l);
    }
    Ok(ObserverGainSet {
        mode: if chain.is_some() { GainMode::Rate } else { GainMode::Nilpotent },
        gains,
        chain,
        norm_constants,
    })
}

/// Deadline after which nilpotent gains give zero error on every node,
/// computed from the interval lengths actually present in `seq`.
///
/// Empty blocks are skipped: they add nothing to the chain of deadlines.
pub fn finite_time_deadline(dec: &Decomposition, seq: &GraphSequence, horizon: u64) -> Result<u64, GainError> {
    let n_nodes = seq.node_count();
    if n_nodes != dec.node_count() {
        return Err(GainError::InvalidParameter(format!(
            "graph has {n_nodes} nodes, system has {}",
            dec.node_count()
        )));
    }
    let horizon = horizon.min(seq.horizon());
    let maps = seq.interval_maps();
    let t_last = if n_nodes > 1 {
        *seq.intervals()
            .get(n_nodes - 1)
            .ok_or(GainError::HorizonTooShort { horizon })?
    } else {
        0
    };
    let spread = 2 * (n_nodes as u64 - 1);
    let slack = |k: u64| k as i128 - (spread * maps.g(k)) as i128;

    let mut prev: Option<u64> = None;
    for j in dec.nonempty_blocks() {
        let nj = dec.block_dims()[j] as u64;
        let (target, lower) = match prev {
            None => (nj, t_last.max(1)),
            Some(p) => (p + nj, 1),
        };
        // smallest τ ≥ lower with k − g̃(k) ≥ target for every k in [τ, horizon]
        let mut tau = None;
        let mut k = horizon;
        while k >= lower && slack(k) >= target as i128 {
            tau = Some(k);
            k -= 1;
        }
        prev = Some(tau.ok_or(GainError::HorizonTooShort { horizon })?);
    }
    Ok(prev.unwrap_or(0))
}

/// Step `k_N` after which the rate bound of the chain is in force: `k_1`
/// is the later of `t_{N−1}` and the first step from which
/// `2(N−1)g(k) ≤ δ̄k` holds up to the horizon, and `k_j = k_{j−1}/(1−δ̄)`.
pub fn rate_burn_in(chain: &RateChain, seq: &GraphSequence) -> Option<u64> {
    let n_nodes = seq.node_count();
    let horizon = seq.horizon();
    let maps = seq.interval_maps();
    let spread = 2 * (n_nodes as u64 - 1);
    let mut k_bar = None;
    let mut k = horizon;
    while k >= 1 {
        if (spread * maps.g(k)) as f64 > chain.delta_bar * k as f64 {
            break;
        }
        k_bar = Some(k);
        k -= 1;
    }
    let k_bar = k_bar?;
    let t_last = if n_nodes > 1 {
        *seq.intervals().get(n_nodes - 1)?
    } else {
        0
    };
    let mut kj = k_bar.max(t_last) as f64;
    for _ in 1..chain.rho_j.len() {
        kj = (kj / (1.0 - chain.delta_bar)).ceil();
    }
    Some(kj as u64)
}
