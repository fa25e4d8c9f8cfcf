//! Deterministic simulation of a prepared scenario, trace output and the
//! checks run against a finished trace.

use std::collections::VecDeque;
use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aoi::{Adoption, AoiModel, Broadcast, FreshnessIndex, NodeState, ProtocolError};
use crate::gains::{finite_time_deadline, rate_burn_in};
use crate::graph::{check_conditions, is_jointly_strongly_r_robust, GraphSequence, IntervalRule};
use crate::lti::{Decomposition, LtiError};
use crate::resilient::{
    apply_adversary, resilient_nonsource_step, source_luenberger, AdversaryStrategy, ResilientNodeState, ScalarMessage,
    Slot,
};
use crate::scenario::{PreparedProtocol, PreparedScenario, ScalarSetup, WeightRule};

/// Errors at or below this count as zero.
pub const FINITE_TIME_TOL: f64 = 1e-8;
/// Allowed excess of the fitted log-slope over `ln ρ`.
pub const RATE_SLACK: f64 = 0.02;
/// Minimum number of points in a rate fit.
pub const MIN_FIT_POINTS: usize = 10;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Lti(#[from] LtiError),
    #[error("fit window [{from}, {to}] has fewer than {MIN_FIT_POINTS} points")]
    InsufficientTail { from: u64, to: u64 },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstateRecord {
    pub tau: FreshnessIndex,
    /// `ẑ^(j) − z^(j)`.
    pub error: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    /// Empty for adversarial nodes.
    pub x_hat: Vec<f64>,
    /// `‖x̂ − x‖`; 0 for adversarial nodes.
    pub error_norm: f64,
    /// Scalar index of the resilient protocol.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<FreshnessIndex>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub substates: Vec<SubstateRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub slots: Vec<Slot>,
}

/// State at the start of step k, plus what happened during step k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: u64,
    pub x: Vec<f64>,
    pub nodes: Vec<NodeRecord>,
    pub adoptions: Vec<Adoption>,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub name: String,
    pub protocol: String,
    pub block_dims: Vec<usize>,
    /// `false` for adversarial nodes.
    pub regular: Vec<bool>,
    pub steps: Vec<StepRecord>,
}

impl SimTrace {
    pub fn horizon(&self) -> u64 {
        self.steps.last().map_or(0, |s| s.k)
    }

    /// `‖e_i[k]‖` for one node over the whole run.
    pub fn node_error_series(&self, i: usize) -> Vec<f64> {
        self.steps.iter().map(|s| s.nodes[i].error_norm).collect()
    }
}

/// Weights `w_ij` used by node `i` at step `k`. They sum to one.
pub fn consensus_weights(seq: &GraphSequence, k: u64, i: usize, rule: &WeightRule) -> Vec<(usize, f64)> {
    match rule {
        WeightRule::Uniform => {
            let mut members = seq.in_neighbors(i, k);
            members.push(i);
            members.sort_unstable();
            let w = 1.0 / members.len() as f64;
            members.into_iter().map(|j| (j, w)).collect()
        }
        WeightRule::Tree { root } => match bfs_parents(seq, k, *root)[i] {
            Some(p) if i != *root => vec![(p, 1.0)],
            _ => vec![(i, 1.0)],
        },
    }
}

fn bfs_parents(seq: &GraphSequence, k: u64, root: usize) -> Vec<Option<usize>> {
    let n = seq.node_count();
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (a, b) in seq.edges_at(k) {
        out[a].push(b);
    }
    let mut parent = vec![None; n];
    let mut seen = vec![false; n];
    seen[root] = true;
    let mut queue = VecDeque::from([root]);
    while let Some(u) = queue.pop_front() {
        for &v in &out[u] {
            if !seen[v] {
                seen[v] = true;
                parent[v] = Some(u);
                queue.push_back(v);
            }
        }
    }
    parent
}

fn to_vec(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

fn plant_step(p: &PreparedScenario, x: &DVector<f64>) -> DVector<f64> {
    let next = p.system.a() * x;
    match &p.disturbance {
        Some(d) => next + d,
        None => next,
    }
}

pub fn run(p: &PreparedScenario) -> Result<SimTrace, SimError> {
    match &p.protocol {
        PreparedProtocol::Aoi { dec, model, .. } => run_aoi(p, dec, model),
        PreparedProtocol::Resilient {
            scalar, f, adversaries, ..
        } => {
            let mut strategies: Vec<Option<AdversaryStrategy>> = vec![None; p.system.node_count()];
            for s in adversaries {
                strategies[s.node] = Some(s.strategy.clone());
            }
            run_resilient(p, scalar, *f, &strategies)
        }
        PreparedProtocol::Naive { scalar, weights } => run_naive(p, scalar, weights),
    }
}

fn run_aoi(p: &PreparedScenario, dec: &Decomposition, model: &AoiModel) -> Result<SimTrace, SimError> {
    let nodes = p.system.node_count();
    let dims = dec.block_dims().to_vec();
    let mut states: Vec<NodeState> = Vec::with_capacity(nodes);
    for (i, x_hat) in p.initial_estimates.iter().enumerate() {
        states.push(model.initial_state(i, dec.to_substate(x_hat)?.blocks)?);
    }
    let mut x = p.x0.clone();
    let mut steps = Vec::with_capacity(p.horizon as usize + 1);
    for k in 0..=p.horizon {
        let z = dec.to_substate(&x)?;
        let records = states
            .iter()
            .map(|s| {
                let x_hat = model.full_estimate(s);
                NodeRecord {
                    error_norm: (&x_hat - &x).norm(),
                    x_hat: to_vec(&x_hat),
                    tau: None,
                    substates: s
                        .substates
                        .iter()
                        .zip(&z.blocks)
                        .map(|(e, zj)| SubstateRecord {
                            tau: e.tau,
                            error: to_vec(&(&e.z_hat - zj)),
                        })
                        .collect(),
                    slots: Vec::new(),
                }
            })
            .collect();
        let mut adoptions = Vec::new();
        if k < p.horizon {
            let broadcasts: Vec<Broadcast> = states.iter().map(NodeState::broadcast).collect();
            let mut next = Vec::with_capacity(nodes);
            for (i, s) in states.iter().enumerate() {
                let inbox: Vec<Broadcast> = p
                    .graph
                    .in_neighbors(i, k)
                    .into_iter()
                    .map(|j| broadcasts[j].clone())
                    .collect();
                let y = p.system.measure(i, &x);
                let (ns, adopted) = model.step_node(s, &y, &inbox)?;
                adoptions.extend(adopted);
                next.push(ns);
            }
            states = next;
        }
        steps.push(StepRecord {
            k,
            x: to_vec(&x),
            nodes: records,
            adoptions,
            dropped: 0,
        });
        x = plant_step(p, &x);
    }
    Ok(SimTrace {
        name: p.name.clone(),
        protocol: p.protocol.name().into(),
        block_dims: dims,
        regular: vec![true; nodes],
        steps,
    })
}

fn scalar_record(x: f64, x_hat: f64, tau: Option<FreshnessIndex>, slots: Vec<Slot>) -> NodeRecord {
    NodeRecord {
        x_hat: vec![x_hat],
        error_norm: (x_hat - x).abs(),
        tau,
        substates: Vec::new(),
        slots,
    }
}

fn run_resilient(
    p: &PreparedScenario,
    scalar: &ScalarSetup,
    f: usize,
    strategies: &[Option<AdversaryStrategy>],
) -> Result<SimTrace, SimError> {
    let nodes = scalar.c.len();
    let a = scalar.a;
    let mut states: Vec<ResilientNodeState> = (0..nodes)
        .map(|i| {
            let v = p.initial_estimates[i][0];
            if scalar.is_source(i) {
                ResilientNodeState::source(v)
            } else {
                ResilientNodeState::nonsource(v)
            }
        })
        .collect();
    let mut adv_rng = ChaCha8Rng::seed_from_u64(p.seed);
    adv_rng.set_stream(1);
    let mut truth: Vec<f64> = Vec::with_capacity(p.horizon as usize + 1);
    let mut x = p.x0.clone();
    let mut steps = Vec::with_capacity(p.horizon as usize + 1);
    for k in 0..=p.horizon {
        let xk = x[0];
        truth.push(xk);
        let records = (0..nodes)
            .map(|i| match strategies[i] {
                Some(_) => NodeRecord {
                    x_hat: Vec::new(),
                    error_norm: 0.0,
                    tau: None,
                    substates: Vec::new(),
                    slots: Vec::new(),
                },
                None => scalar_record(xk, states[i].x_hat, Some(states[i].tau), states[i].slots.clone()),
            })
            .collect();
        let mut dropped = 0;
        if k < p.horizon {
            let mut next = states.clone();
            for i in 0..nodes {
                if strategies[i].is_some() {
                    continue;
                }
                if scalar.is_source(i) {
                    let y = scalar.c[i] * xk;
                    next[i] = ResilientNodeState::source(source_luenberger(states[i].x_hat, y, a, scalar.c[i], scalar.l[i]));
                    continue;
                }
                let inbox: Vec<ScalarMessage> = p
                    .graph
                    .in_neighbors(i, k)
                    .into_iter()
                    .filter_map(|j| match &strategies[j] {
                        Some(s) => apply_adversary(s, j, k, &truth, &mut adv_rng),
                        None => Some(states[j].message(j)),
                    })
                    .collect();
                let step = resilient_nonsource_step(&states[i], &inbox, k, a, f);
                dropped += step.dropped;
                next[i] = step.state;
            }
            states = next;
        }
        steps.push(StepRecord {
            k,
            x: vec![xk],
            nodes: records,
            adoptions: Vec::new(),
            dropped,
        });
        x = plant_step(p, &x);
    }
    Ok(SimTrace {
        name: p.name.clone(),
        protocol: p.protocol.name().into(),
        block_dims: vec![1],
        regular: strategies.iter().map(Option::is_none).collect(),
        steps,
    })
}

fn run_naive(p: &PreparedScenario, scalar: &ScalarSetup, rule: &WeightRule) -> Result<SimTrace, SimError> {
    let nodes = scalar.c.len();
    let a = scalar.a;
    let mut x_hat: Vec<f64> = p.initial_estimates.iter().map(|v| v[0]).collect();
    let mut x = p.x0.clone();
    let mut steps = Vec::with_capacity(p.horizon as usize + 1);
    for k in 0..=p.horizon {
        let xk = x[0];
        let records = x_hat.iter().map(|&v| scalar_record(xk, v, None, Vec::new())).collect();
        if k < p.horizon {
            x_hat = (0..nodes)
                .map(|i| {
                    if scalar.is_source(i) {
                        source_luenberger(x_hat[i], scalar.c[i] * xk, a, scalar.c[i], scalar.l[i])
                    } else {
                        a * consensus_weights(&p.graph, k, i, rule)
                            .iter()
                            .map(|&(j, w)| w * x_hat[j])
                            .sum::<f64>()
                    }
                })
                .collect();
        }
        steps.push(StepRecord {
            k,
            x: vec![xk],
            nodes: records,
            adoptions: Vec::new(),
            dropped: 0,
        });
        x = plant_step(p, &x);
    }
    Ok(SimTrace {
        name: p.name.clone(),
        protocol: p.protocol.name().into(),
        block_dims: vec![1],
        regular: vec![true; nodes],
        steps,
    })
}

/// Largest error over regular nodes at each step. NaN if any error is NaN.
pub fn max_error_series(trace: &SimTrace) -> Vec<f64> {
    trace
        .steps
        .iter()
        .map(|s| {
            s.nodes
                .iter()
                .zip(&trace.regular)
                .filter(|(_, &r)| r)
                .map(|(n, _)| n.error_norm)
                .fold(0.0, |m: f64, e| if e.is_nan() || e > m { e } else { m })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub from: u64,
    pub to: u64,
    /// Least-squares slope of `ln e[k]`.
    pub slope: f64,
    pub target: f64,
    /// Growth of `e[k]/ρ^k` from the first to the second half of the
    /// window, in log units.
    pub envelope_growth: f64,
    /// The error reached exactly zero and stayed there.
    pub finite_time: bool,
    pub pass: bool,
}

/// Decay check on `series[from..=to]`: log-slope at most `ln ρ + 0.02`,
/// and `e[k]/ρ^k` not growing faster than that slack allows.
pub fn verify_rate(series: &[f64], rho: f64, from: u64, to: Option<u64>) -> Result<RateReport, SimError> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(SimError::Invalid(format!("rate {rho} not in (0, 1)")));
    }
    let last = series.len().saturating_sub(1) as u64;
    let to = to.unwrap_or(last).min(last);
    if series.is_empty() || to < from || ((to - from + 1) as usize) < MIN_FIT_POINTS {
        return Err(SimError::InsufficientTail { from, to });
    }
    let window = &series[from as usize..=to as usize];
    let target = rho.ln();
    let fail = |slope: f64, envelope_growth: f64| RateReport {
        from,
        to,
        slope,
        target,
        envelope_growth,
        finite_time: false,
        pass: false,
    };
    if window.iter().any(|e| !e.is_finite() || *e < 0.0) {
        return Ok(fail(f64::NAN, f64::NAN));
    }
    let zero_tail = match window.iter().rposition(|&e| e != 0.0) {
        None => true,
        Some(last) => last + 1 < window.len(),
    };
    if zero_tail {
        // exact zero from some step on: finite-time, the rate is vacuous
        return Ok(RateReport {
            from,
            to,
            slope: f64::NEG_INFINITY,
            target,
            envelope_growth: f64::NEG_INFINITY,
            finite_time: true,
            pass: true,
        });
    }
    // isolated exact zeros satisfy any bound and carry no slope information
    let pts: Vec<(f64, f64)> = window
        .iter()
        .enumerate()
        .filter(|(_, &e)| e > 0.0)
        .map(|(o, &e)| ((from + o as u64) as f64, e.ln()))
        .collect();
    if pts.len() < MIN_FIT_POINTS {
        return Err(SimError::InsufficientTail { from, to });
    }
    let n = pts.len() as f64;
    let mk = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ml = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mk).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mk) * (p.1 - ml)).sum();
    let slope = sxy / sxx;
    let scaled: Vec<f64> = pts.iter().map(|p| p.1 - p.0 * target).collect();
    let half = scaled.len() / 2;
    let head = scaled[..half].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tail = scaled[half..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let envelope_growth = tail - head;
    let allowed = RATE_SLACK * scaled.len() as f64;
    Ok(RateReport {
        from,
        to,
        slope,
        target,
        envelope_growth,
        finite_time: false,
        pass: slope <= target + RATE_SLACK && envelope_growth <= allowed,
    })
}

/// Every entry from `deadline` on is at most [`FINITE_TIME_TOL`].
pub fn verify_finite_time(series: &[f64], deadline: u64) -> bool {
    series
        .iter()
        .skip(deadline as usize)
        .all(|&e| e <= FINITE_TIME_TOL)
}

/// First step from which every later error is at most [`FINITE_TIME_TOL`].
pub fn settled_at(series: &[f64]) -> Option<u64> {
    let last_bad = series.iter().rposition(|&e| !(e <= FINITE_TIME_TOL));
    match last_bad {
        None => Some(0),
        Some(b) if b + 1 < series.len() => Some(b as u64 + 1),
        Some(_) => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    SourceIndex,
    Retriggered,
    IndexGrowth,
    SourceNotPreferred,
    AdoptionWithoutEdge,
    DelayedError,
    TriggerDeadline,
    DelayBound,
    SlotCount,
    SlotBookkeeping,
    SlotGrowth,
    ConvexHull,
    Weights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub k: u64,
    pub node: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub substate: Option<usize>,
    pub kind: ViolationKind,
    pub detail: String,
}

struct Sink(Vec<Violation>);

impl Sink {
    fn push(&mut self, k: u64, node: usize, substate: Option<usize>, kind: ViolationKind, detail: String) {
        self.0.push(Violation {
            k,
            node,
            substate,
            kind,
            detail,
        });
    }
}

/// Structural properties every run of the given protocol must satisfy.
/// Delay and trigger bounds are only checked when the graph meets the
/// hypotheses they rely on.
pub fn assert_online_invariants(p: &PreparedScenario, trace: &SimTrace) -> Vec<Violation> {
    let mut sink = Sink(Vec::new());
    match &p.protocol {
        PreparedProtocol::Aoi { dec, .. } => aoi_invariants(p, dec, trace, &mut sink),
        PreparedProtocol::Resilient { scalar, f, .. } => resilient_invariants(p, scalar, *f, trace, &mut sink),
        PreparedProtocol::Naive { scalar, weights } => {
            for k in 0..p.horizon {
                for i in (0..scalar.c.len()).filter(|&i| !scalar.is_source(i)) {
                    let w = consensus_weights(&p.graph, k, i, weights);
                    let sum: f64 = w.iter().map(|x| x.1).sum();
                    let allowed = w.iter().all(|&(j, v)| v >= 0.0 && (j == i || p.graph.has_edge(k, j, i)));
                    if (sum - 1.0).abs() > 1e-12 || !allowed {
                        sink.push(k, i, None, ViolationKind::Weights, format!("weights {w:?}"));
                    }
                }
            }
        }
    }
    sink.0
}

fn aoi_invariants(p: &PreparedScenario, dec: &Decomposition, trace: &SimTrace, sink: &mut Sink) {
    use FreshnessIndex::{Age, Omega};
    let nodes = dec.node_count();
    let dims = dec.block_dims();
    let conditions = check_conditions(&p.graph);
    let maps = p.graph.interval_maps();
    let trigger_from = (conditions.c1_monotone && conditions.c3_ok)
        .then(|| p.graph.intervals().get(nodes - 1).copied())
        .flatten();
    let first = dec.nonempty_blocks().next();
    // A_{j0 j0}^m, grown on demand
    let mut powers: Vec<DMatrix<f64>> = Vec::new();
    if let Some(j0) = first {
        powers.push(DMatrix::identity(dims[j0], dims[j0]));
    }

    for (k_idx, step) in trace.steps.iter().enumerate() {
        let k = step.k;
        for a in &step.adoptions {
            if !p.graph.has_edge(k, a.from, a.node) {
                sink.push(k, a.node, Some(a.substate), ViolationKind::AdoptionWithoutEdge, format!("from {}", a.from));
            }
        }
        for i in 0..nodes {
            for j in dec.nonempty_blocks() {
                let tau = step.nodes[i].substates[j].tau;
                if i == j {
                    if tau != Age(0) {
                        sink.push(k, i, Some(j), ViolationKind::SourceIndex, format!("source index {tau}"));
                    }
                    continue;
                }
                if tau == Age(0) {
                    sink.push(k, i, Some(j), ViolationKind::SourceIndex, "non-source at index 0".into());
                }
                if let Some(prev) = k_idx.checked_sub(1).map(|q| trace.steps[q].nodes[i].substates[j].tau) {
                    match (prev, tau) {
                        (Age(_), Omega) => {
                            sink.push(k, i, Some(j), ViolationKind::Retriggered, "index fell back to w".into())
                        }
                        (Age(a), Age(b)) if b > a + 1 => {
                            sink.push(k, i, Some(j), ViolationKind::IndexGrowth, format!("{a} -> {b}"))
                        }
                        _ => {}
                    }
                }
                if k < p.horizon && p.graph.has_edge(k, j, i) {
                    let took = step.adoptions.iter().any(|a| a.node == i && a.substate == j && a.from == j);
                    if !took {
                        sink.push(k, i, Some(j), ViolationKind::SourceNotPreferred, "source in-neighbor ignored".into());
                    }
                }
                if let Some(t) = trigger_from.filter(|&t| k >= t) {
                    match tau {
                        Omega => sink.push(
                            k,
                            i,
                            Some(j),
                            ViolationKind::TriggerDeadline,
                            format!("still w after t_(N-1) = {t}"),
                        ),
                        Age(a) => {
                            let bound = 2 * (nodes as u64 - 1) * maps.g(k);
                            if a > bound {
                                sink.push(k, i, Some(j), ViolationKind::DelayBound, format!("{a} > {bound}"));
                            }
                        }
                    }
                }
                if Some(j) == first && p.disturbance.is_none() {
                    if let Age(m) = tau {
                        if m > k {
                            sink.push(k, i, Some(j), ViolationKind::DelayedError, format!("index {m} exceeds k"));
                            continue;
                        }
                        while powers.len() as u64 <= m {
                            let next = powers.last().unwrap() * dec.a_block(j, j);
                            powers.push(next);
                        }
                        let past = DVector::from_column_slice(&trace.steps[(k - m) as usize].nodes[j].substates[j].error);
                        let now = DVector::from_column_slice(&step.nodes[i].substates[j].error);
                        let predicted = &powers[m as usize] * past;
                        let scale = DVector::from_column_slice(&step.x).norm().max(1.0);
                        let gap = (&now - &predicted).norm();
                        if gap > 1e-8 * scale {
                            sink.push(k, i, Some(j), ViolationKind::DelayedError, format!("mismatch {gap:e}"));
                        }
                    }
                }
            }
        }
    }
}

fn resilient_invariants(p: &PreparedScenario, scalar: &ScalarSetup, f: usize, trace: &SimTrace, sink: &mut Sink) {
    use FreshnessIndex::{Age, Omega};
    let nodes = scalar.c.len();
    let cap = 2 * f + 1;
    let a = scalar.a;
    let regular_sources: Vec<usize> = scalar.sources.iter().copied().filter(|&s| trace.regular[s]).collect();
    let non_sources = nodes - scalar.sources.len();
    let delay_from = match p.graph.rule() {
        IntervalRule::Constant { period } => {
            let robust = is_jointly_strongly_r_robust(&p.graph, &scalar.sources, 3 * f + 1, *period)
                .map(|r| r.ok)
                .unwrap_or(false);
            robust.then_some(non_sources as u64 * period)
        }
        _ => None,
    };
    let value_at = |k: u64, s: usize| trace.steps[k as usize].nodes[s].x_hat[0];

    for (k_idx, step) in trace.steps.iter().enumerate() {
        let k = step.k;
        for i in (0..nodes).filter(|&i| trace.regular[i] && !scalar.is_source(i)) {
            let rec = &step.nodes[i];
            let tau = rec.tau.unwrap_or(Omega);
            let slots = &rec.slots;
            let q = slots.len();
            let mut ids: Vec<usize> = slots.iter().map(|s| s.node).collect();
            ids.sort_unstable();
            ids.dedup();
            if q > cap || ids.len() != q || (tau.is_triggered() != (q == cap)) {
                sink.push(k, i, None, ViolationKind::SlotCount, format!("q = {q}, index {tau}"));
            }
            for s in slots {
                if s.stamp >= k {
                    sink.push(k, i, None, ViolationKind::SlotBookkeeping, format!("stamp {} not before k", s.stamp));
                    continue;
                }
                if trace.regular[s.node] {
                    match trace.steps[s.stamp as usize].nodes[s.node].tau {
                        Some(Age(t)) if s.index == t + (k - s.stamp) => {}
                        other => sink.push(
                            k,
                            i,
                            None,
                            ViolationKind::SlotBookkeeping,
                            format!("slot for {} holds {} but sender had {other:?} at {}", s.node, s.index, s.stamp),
                        ),
                    }
                }
            }
            if let Some(prev) = k_idx.checked_sub(1).map(|q| &trace.steps[q].nodes[i]) {
                let before = prev.tau.unwrap_or(Omega);
                match (before, tau) {
                    (Age(_), Omega) => sink.push(k, i, None, ViolationKind::Retriggered, "index fell back to w".into()),
                    (Age(x), Age(y)) if y > x + 1 => {
                        sink.push(k, i, None, ViolationKind::IndexGrowth, format!("{x} -> {y}"))
                    }
                    _ => {}
                }
                if before.is_triggered() {
                    for (pos, (old, new)) in prev.slots.iter().zip(slots).enumerate() {
                        if new.index > old.index + 1 {
                            sink.push(
                                k,
                                i,
                                None,
                                ViolationKind::SlotGrowth,
                                format!("slot {pos}: {} -> {}", old.index, new.index),
                            );
                        }
                    }
                }
            }
            if let Some(t) = delay_from.filter(|&t| k >= t) {
                let bound = 2 * t;
                match tau {
                    Omega => sink.push(k, i, None, ViolationKind::TriggerDeadline, format!("still w at k >= {t}")),
                    Age(m) if m > bound => sink.push(k, i, None, ViolationKind::DelayBound, format!("{m} > {bound}")),
                    _ => {}
                }
            }
            if let Age(m) = tau {
                if m > k || m == 0 {
                    sink.push(k, i, None, ViolationKind::ConvexHull, format!("index {m} at step {k}"));
                    continue;
                }
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for r in 1..=m {
                    for &s in &regular_sources {
                        let v = a.powi(r as i32) * value_at(k - r, s);
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
                let x = rec.x_hat[0];
                let slack = 1e-9 * (1.0 + lo.abs().max(hi.abs()));
                if !(x >= lo - slack && x <= hi + slack) {
                    sink.push(k, i, None, ViolationKind::ConvexHull, format!("{x:e} outside [{lo:e}, {hi:e}]"));
                }
            }
        }
    }
}

/// Per-step CSV: one row per regular node and non-empty sub-state.
pub fn write_csv<W: Write>(trace: &SimTrace, mut w: W) -> io::Result<()> {
    writeln!(w, "k,node,substate,e_norm,tau,adopted_from")?;
    let aoi = trace.protocol == "aoi";
    for step in &trace.steps {
        for (i, rec) in step.nodes.iter().enumerate() {
            if !trace.regular[i] {
                continue;
            }
            if aoi {
                for (j, s) in rec.substates.iter().enumerate() {
                    if trace.block_dims[j] == 0 {
                        continue;
                    }
                    let norm = s.error.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let from = step
                        .adoptions
                        .iter()
                        .find(|a| a.node == i && a.substate == j)
                        .map(|a| a.from.to_string())
                        .unwrap_or_default();
                    writeln!(w, "{},{},{},{:e},{},{}", step.k, i, j, norm, s.tau, from)?;
                }
            } else {
                let tau = rec.tau.map(|t| t.to_string()).unwrap_or_default();
                writeln!(w, "{},{},0,{:e},{},", step.k, i, rec.error_norm, tau)?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub name: String,
    pub protocol: String,
    pub horizon: u64,
    pub seed: u64,
    pub initial_max_error: f64,
    pub final_max_error: f64,
    pub peak_max_error: f64,
    /// Final error non-finite or above `1e6 · max(1, initial)`.
    pub diverged: bool,
    pub settled_at: Option<u64>,
    pub adoptions: usize,
    pub dropped_messages: usize,
    pub violation_count: usize,
    /// At most the first 20.
    pub violations: Vec<Violation>,
}

pub fn summarize(trace: &SimTrace, seed: u64, violations: &[Violation]) -> SimSummary {
    let series = max_error_series(trace);
    let initial = series.first().copied().unwrap_or(0.0);
    let last = series.last().copied().unwrap_or(0.0);
    let peak = series.iter().copied().fold(0.0, |m: f64, e| if e.is_nan() || e > m { e } else { m });
    SimSummary {
        name: trace.name.clone(),
        protocol: trace.protocol.clone(),
        horizon: trace.horizon(),
        seed,
        initial_max_error: initial,
        final_max_error: last,
        peak_max_error: peak,
        diverged: !last.is_finite() || last > 1e6 * initial.max(1.0),
        settled_at: settled_at(&series),
        adoptions: trace.steps.iter().map(|s| s.adoptions.len()).sum(),
        dropped_messages: trace.steps.iter().map(|s| s.dropped).sum(),
        violation_count: violations.len(),
        violations: violations.iter().take(20).cloned().collect(),
    }
}

/// Summary plus the rate or deadline verdict that applies to the
/// scenario's gains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    #[serde(flatten)]
    pub summary: SimSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<RateReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deadline: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deadline_met: Option<bool>,
}

impl RunReport {
    /// No invariant violations. Rate and deadline verdicts are reported
    /// but do not count, since they depend on hypotheses the scenario may
    /// not meet.
    pub fn passed(&self) -> bool {
        self.summary.violation_count == 0
    }
}

pub fn analyze(p: &PreparedScenario, trace: &SimTrace, violations: &[Violation]) -> RunReport {
    let series = max_error_series(trace);
    let mut report = RunReport {
        summary: summarize(trace, p.seed, violations),
        burn_in: None,
        rate: None,
        deadline: None,
        deadline_met: None,
    };
    let rate_from = |rho: f64, from: u64, report: &mut RunReport| {
        report.burn_in = Some(from);
        report.rate = verify_rate(&series, rho, from, None).ok();
    };
    match &p.protocol {
        PreparedProtocol::Aoi { dec, gains, .. } => match &gains.chain {
            Some(chain) => {
                if let Some(k) = rate_burn_in(chain, &p.graph) {
                    rate_from(chain.rho, k, &mut report);
                }
            }
            None => {
                let c = check_conditions(&p.graph);
                let applies = p.disturbance.is_none() && c.c1_monotone && c.c3_ok;
                if let Some(d) = applies.then(|| finite_time_deadline(dec, &p.graph, p.horizon).ok()).flatten() {
                    report.deadline = Some(d);
                    report.deadline_met = Some(verify_finite_time(&series, d));
                }
            }
        },
        PreparedProtocol::Resilient { scalar, f, .. } => {
            let rho = scalar
                .sources
                .iter()
                .filter(|&&s| trace.regular[s])
                .map(|&s| (scalar.a - scalar.l[s] * scalar.c[s]).abs())
                .fold(0.0, f64::max);
            if rho == 0.0 && p.disturbance.is_none() {
                let period = match p.graph.rule() {
                    IntervalRule::Constant { period } => Some(*period),
                    _ => None,
                };
                let robust = |t: u64| {
                    is_jointly_strongly_r_robust(&p.graph, &scalar.sources, 3 * f + 1, t).is_ok_and(|r| r.ok)
                };
                if let Some(period) = period.filter(|&t| robust(t)) {
                    let nodes = scalar.c.len() as u64;
                    let d = 2 * (nodes - scalar.sources.len() as u64) * period + 1;
                    report.deadline = Some(d);
                    report.deadline_met = Some(verify_finite_time(&series, d));
                }
            } else if rho < 1.0 {
                rate_from(rho, p.horizon / 2, &mut report);
            }
        }
        PreparedProtocol::Naive { .. } => {}
    }
    report
}
