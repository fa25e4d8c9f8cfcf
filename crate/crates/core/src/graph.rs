//! Time-varying directed graphs: schedules, interval bookkeeping,
//! connectivity and robustness checks, and seeded generators.
//!
//! Node ids are 0-based. An edge `(i, j)` means node i transmits to node j,
//! so the neighbors a node listens to are its in-neighbors.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Edge = (usize, usize);
pub type EdgeSet = BTreeSet<Edge>;

/// Largest supported network.
pub const MAX_NODES: usize = 64;
/// Largest `|V∖S|` the exhaustive robustness check will enumerate.
pub const MAX_ROBUST_SUBSET: usize = 22;
/// Bounded retries for the generators.
pub const GENERATOR_RETRIES: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("node id {node} out of range for {n} nodes")]
    InvalidNode { node: usize, n: usize },
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("invalid interval sequence: {0}")]
    InvalidIntervals(String),
    #[error("step {k} outside horizon {horizon}")]
    OutOfHorizon { k: u64, horizon: u64 },
    #[error("node set must be non-empty")]
    EmptySet,
    #[error("{size} non-source nodes exceed the exhaustive check limit of {MAX_ROBUST_SUBSET}")]
    SubsetBlowup { size: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("generation failed in window {window} after {GENERATOR_RETRIES} attempts")]
    GenerationFailed { window: u64 },
}

/// Rule that produced the interval sequence `t_0 = 0 < t_1 < ...`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum IntervalRule {
    /// `f(t_q) = T`.
    Constant { period: u64 },
    /// `f(t_q) = ⌊√(t_q + 1)⌋`.
    FloorSqrt,
    /// `f(t_q) = max(1, ⌊δ t_q / (2(N−1))⌋)`.
    Linear { delta: f64 },
    /// Listed explicitly.
    Explicit,
}

fn isqrt(v: u64) -> u64 {
    let mut r = (v as f64).sqrt() as u64;
    while r * r > v {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= v {
        r += 1;
    }
    r
}

/// Interval starts up to and including the first one past `horizon`.
pub fn intervals_from_rule(rule: &IntervalRule, n_nodes: usize, horizon: u64) -> Result<Vec<u64>, GraphError> {
    let step = |t: u64| -> Result<u64, GraphError> {
        Ok(match rule {
            IntervalRule::Constant { period } => {
                if *period == 0 {
                    return Err(GraphError::InvalidParameter("period must be >= 1".into()));
                }
                *period
            }
            IntervalRule::FloorSqrt => isqrt(t + 1),
            IntervalRule::Linear { delta } => {
                if !(*delta > 0.0 && *delta < 1.0) {
                    return Err(GraphError::InvalidParameter(format!("delta = {delta} not in (0, 1)")));
                }
                let denom = (2 * n_nodes.saturating_sub(1)).max(1) as f64;
                ((delta * t as f64 / denom).floor() as u64).max(1)
            }
            IntervalRule::Explicit => {
                return Err(GraphError::InvalidParameter(
                    "explicit intervals cannot be generated".into(),
                ))
            }
        })
    };
    let mut t = vec![0u64];
    while *t.last().unwrap() <= horizon {
        let last = *t.last().unwrap();
        t.push(last + step(last)?);
    }
    Ok(t)
}

/// The map `k ↦ G[k]` together with its declared interval sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSequence {
    n_nodes: usize,
    horizon: u64,
    intervals: Vec<u64>,
    rule: IntervalRule,
    schedule: BTreeMap<u64, EdgeSet>,
}

impl GraphSequence {
    pub fn new(
        n_nodes: usize,
        horizon: u64,
        intervals: Vec<u64>,
        rule: IntervalRule,
        schedule: BTreeMap<u64, EdgeSet>,
    ) -> Result<Self, GraphError> {
        if n_nodes == 0 || n_nodes > MAX_NODES {
            return Err(GraphError::InvalidParameter(format!(
                "node count {n_nodes} not in 1..={MAX_NODES}"
            )));
        }
        if intervals.first() != Some(&0) {
            return Err(GraphError::InvalidIntervals("t_0 must be 0".into()));
        }
        if let Some(w) = intervals.windows(2).find(|w| w[1] <= w[0]) {
            return Err(GraphError::InvalidIntervals(format!(
                "not strictly increasing at {} -> {}",
                w[0], w[1]
            )));
        }
        if *intervals.last().unwrap() <= horizon {
            return Err(GraphError::InvalidIntervals(format!(
                "intervals end at {} but the horizon is {horizon}",
                intervals.last().unwrap()
            )));
        }
        let mut clean = BTreeMap::new();
        for (k, edges) in schedule {
            if k > horizon {
                return Err(GraphError::OutOfHorizon { k, horizon });
            }
            for &(i, j) in &edges {
                for node in [i, j] {
                    if node >= n_nodes {
                        return Err(GraphError::InvalidNode { node, n: n_nodes });
                    }
                }
                if i == j {
                    return Err(GraphError::SelfLoop(i));
                }
            }
            if !edges.is_empty() {
                clean.insert(k, edges);
            }
        }
        Ok(Self {
            n_nodes,
            horizon,
            intervals,
            rule,
            schedule: clean,
        })
    }

    pub fn node_count(&self) -> usize {
        self.n_nodes
    }

    pub fn horizon(&self) -> u64 {
        self.horizon
    }

    pub fn intervals(&self) -> &[u64] {
        &self.intervals
    }

    pub fn rule(&self) -> &IntervalRule {
        &self.rule
    }

    /// Non-empty steps only.
    pub fn schedule(&self) -> &BTreeMap<u64, EdgeSet> {
        &self.schedule
    }

    pub fn edges_at(&self, k: u64) -> impl Iterator<Item = Edge> + '_ {
        self.schedule.get(&k).into_iter().flat_map(|s| s.iter().copied())
    }

    pub fn has_edge(&self, k: u64, from: usize, to: usize) -> bool {
        self.schedule.get(&k).is_some_and(|s| s.contains(&(from, to)))
    }

    /// In-neighbors of `i` at step `k`, ascending.
    pub fn in_neighbors(&self, i: usize, k: u64) -> Vec<usize> {
        self.edges_at(k).filter(|&(_, j)| j == i).map(|(s, _)| s).collect()
    }

    /// `q` with `t_q ≤ k < t_{q+1}`.
    pub fn interval_index(&self, k: u64) -> usize {
        self.intervals.partition_point(|&t| t <= k) - 1
    }

    pub fn interval_maps(&self) -> IntervalMaps<'_> {
        IntervalMaps {
            intervals: &self.intervals,
        }
    }

    /// Same sequence with a shorter horizon.
    pub fn truncated(&self, horizon: u64) -> Result<Self, GraphError> {
        if horizon > self.horizon {
            return Err(GraphError::OutOfHorizon {
                k: horizon,
                horizon: self.horizon,
            });
        }
        let schedule = self.schedule.range(..=horizon).map(|(k, e)| (*k, e.clone())).collect();
        Self::new(self.n_nodes, horizon, self.intervals.clone(), self.rule.clone(), schedule)
    }
}

/// `m(k) = t_q`, `M(k) = t_{q+1}` and `g(k) = M(k) − m(k)` for the
/// interval containing `k`.
#[derive(Debug, Clone, Copy)]
pub struct IntervalMaps<'a> {
    intervals: &'a [u64],
}

impl IntervalMaps<'_> {
    fn q(&self, k: u64) -> usize {
        let q = self.intervals.partition_point(|&t| t <= k);
        assert!(q < self.intervals.len(), "step {k} beyond the declared intervals");
        q - 1
    }

    pub fn m(&self, k: u64) -> u64 {
        self.intervals[self.q(k)]
    }

    pub fn big_m(&self, k: u64) -> u64 {
        self.intervals[self.q(k) + 1]
    }

    pub fn g(&self, k: u64) -> u64 {
        let q = self.q(k);
        self.intervals[q + 1] - self.intervals[q]
    }
}

/// Union of `E[τ]` for `τ ∈ [k1, k2]`.
pub fn union_graph(seq: &GraphSequence, k1: u64, k2: u64) -> Result<EdgeSet, GraphError> {
    if k1 > k2 {
        return Err(GraphError::InvalidParameter(format!("empty window [{k1}, {k2}]")));
    }
    if k2 > seq.horizon {
        return Err(GraphError::OutOfHorizon {
            k: k2,
            horizon: seq.horizon,
        });
    }
    Ok(seq
        .schedule
        .range(k1..=k2)
        .flat_map(|(_, e)| e.iter().copied())
        .collect())
}

fn reaches_all(adj: &[Vec<usize>]) -> bool {
    let n = adj.len();
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                queue.push_back(v);
            }
        }
    }
    count == n
}

/// One strongly connected component covering all `n` nodes. Edges with
/// out-of-range endpoints are ignored.
pub fn is_strongly_connected<'a>(edges: impl IntoIterator<Item = &'a Edge>, n: usize) -> bool {
    if n <= 1 {
        return true;
    }
    let mut fwd = vec![Vec::new(); n];
    let mut rev = vec![Vec::new(); n];
    for &(i, j) in edges {
        if i < n && j < n {
            fwd[i].push(j);
            rev[j].push(i);
        }
    }
    reaches_all(&fwd) && reaches_all(&rev)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    /// Interval lengths non-decreasing.
    pub c1_monotone: bool,
    /// `max 2(N−1)g(k)/k` over the second half of the horizon.
    pub c2_delta_hat: f64,
    pub c2_ok: bool,
    /// Every complete interval's union is strongly connected.
    pub c3_ok: bool,
    pub c3_first_failure: Option<usize>,
    pub c3_intervals_checked: usize,
    /// C1 fails while C3 holds: outside what the checker certifies.
    pub non_monotone_note: bool,
}

impl ConditionReport {
    pub fn all_ok(&self) -> bool {
        self.c1_monotone && self.c2_ok && self.c3_ok
    }
}

pub fn check_conditions(seq: &GraphSequence) -> ConditionReport {
    let t = &seq.intervals;
    let lengths: Vec<u64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    let c1_monotone = lengths.windows(2).all(|w| w[1] >= w[0]);

    let h = seq.horizon;
    let maps = seq.interval_maps();
    let spread = 2.0 * (seq.n_nodes as f64 - 1.0);
    let start = h.div_ceil(2).max(1);
    let mut delta_hat: f64 = 0.0;
    if h >= 1 {
        for k in start..=h {
            delta_hat = delta_hat.max(spread * maps.g(k) as f64 / k as f64);
        }
    }

    let mut c3_first_failure = None;
    let mut checked = 0;
    for q in 0..t.len() - 1 {
        let end = t[q + 1] - 1;
        if end > h {
            break;
        }
        checked += 1;
        let union = union_graph(seq, t[q], end).expect("window inside horizon");
        if !is_strongly_connected(&union, seq.n_nodes) {
            c3_first_failure = Some(q);
            break;
        }
    }
    let c3_ok = c3_first_failure.is_none();
    ConditionReport {
        c1_monotone,
        c2_delta_hat: delta_hat,
        c2_ok: delta_hat < 1.0,
        c3_ok,
        c3_first_failure,
        c3_intervals_checked: checked,
        non_monotone_note: !c1_monotone && c3_ok,
    }
}

fn check_ids(ids: &[usize], n: usize) -> Result<(), GraphError> {
    for &node in ids {
        if node >= n {
            return Err(GraphError::InvalidNode { node, n });
        }
    }
    Ok(())
}

/// Some node of `set` has at least `r` in-neighbors outside `set`.
pub fn is_r_reachable(edges: &EdgeSet, n: usize, set: &[usize], r: usize) -> Result<bool, GraphError> {
    if set.is_empty() {
        return Err(GraphError::EmptySet);
    }
    check_ids(set, n)?;
    let inside: BTreeSet<usize> = set.iter().copied().collect();
    let mut outside_in = vec![BTreeSet::new(); n];
    for &(i, j) in edges {
        if j < n && !inside.contains(&i) {
            outside_in[j].insert(i);
        }
    }
    Ok(inside.iter().any(|&i| outside_in[i].len() >= r))
}

/// Every non-empty subset of `V∖S` is r-reachable. Exhaustive over
/// `2^|V∖S| − 1` subsets, enumerated in Gray-code order.
pub fn is_strongly_r_robust_wrt(edges: &EdgeSet, n: usize, sources: &[usize], r: usize) -> Result<bool, GraphError> {
    if n > MAX_NODES {
        return Err(GraphError::InvalidParameter(format!("{n} nodes exceed {MAX_NODES}")));
    }
    check_ids(sources, n)?;
    let source_set: BTreeSet<usize> = sources.iter().copied().collect();
    let rest: Vec<usize> = (0..n).filter(|i| !source_set.contains(i)).collect();
    if rest.len() > MAX_ROBUST_SUBSET {
        return Err(GraphError::SubsetBlowup { size: rest.len() });
    }
    if rest.is_empty() || r == 0 {
        return Ok(true);
    }
    let mut in_mask = vec![0u64; n];
    for &(i, j) in edges {
        if i < n && j < n && i != j {
            in_mask[j] |= 1 << i;
        }
    }
    let m = rest.len();
    let mut members = 0u64;
    for step in 1u64..(1u64 << m) {
        let flip = step.trailing_zeros() as usize;
        members ^= 1 << rest[flip];
        let mut reachable = false;
        let mut bits = members;
        while bits != 0 {
            let i = bits.trailing_zeros() as usize;
            bits &= bits - 1;
            if (in_mask[i] & !members).count_ones() as usize >= r {
                reachable = true;
                break;
            }
        }
        if !reachable {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub ok: bool,
    pub windows_checked: u64,
    pub first_failing_window: Option<u64>,
}

/// Every complete window `[wT, (w+1)T − 1]` inside the horizon has a
/// union that is strongly r-robust with respect to `sources`.
pub fn is_jointly_strongly_r_robust(
    seq: &GraphSequence,
    sources: &[usize],
    r: usize,
    period: u64,
) -> Result<RobustnessReport, GraphError> {
    if period == 0 {
        return Err(GraphError::InvalidParameter("period must be >= 1".into()));
    }
    if seq.horizon + 1 < period {
        return Err(GraphError::InvalidParameter(format!(
            "horizon {} shorter than one window of {period}",
            seq.horizon
        )));
    }
    let mut w = 0;
    while (w + 1) * period - 1 <= seq.horizon {
        let union = union_graph(seq, w * period, (w + 1) * period - 1)?;
        if !is_strongly_r_robust_wrt(&union, seq.n_nodes, sources, r)? {
            return Ok(RobustnessReport {
                ok: false,
                windows_checked: w + 1,
                first_failing_window: Some(w),
            });
        }
        w += 1;
    }
    Ok(RobustnessReport {
        ok: true,
        windows_checked: w,
        first_failing_window: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SequenceKind {
    PeriodicSc { period: u64 },
    GrowingSqrt,
    LinearGrowth { delta: f64 },
    Robust { r: usize, period: u64, sources: Vec<usize> },
}

fn random_other(rng: &mut ChaCha8Rng, n: usize, avoid: usize) -> usize {
    let j = rng.random_range(0..n - 1);
    if j >= avoid {
        j + 1
    } else {
        j
    }
}

/// Seeded sequence of the requested kind. Each interval (or window) gets
/// its required edges at uniformly drawn steps plus `N` extra random edges.
pub fn generate_sequence(kind: &SequenceKind, n: usize, seed: u64, horizon: u64) -> Result<GraphSequence, GraphError> {
    if n == 0 || n > MAX_NODES {
        return Err(GraphError::InvalidParameter(format!("node count {n} not in 1..={MAX_NODES}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        SequenceKind::PeriodicSc { .. } | SequenceKind::GrowingSqrt | SequenceKind::LinearGrowth { .. } => {
            let rule = match kind {
                SequenceKind::PeriodicSc { period } => IntervalRule::Constant { period: *period },
                SequenceKind::GrowingSqrt => IntervalRule::FloorSqrt,
                SequenceKind::LinearGrowth { delta } => IntervalRule::Linear { delta: *delta },
                SequenceKind::Robust { .. } => unreachable!(),
            };
            let intervals = intervals_from_rule(&rule, n, horizon)?;
            let mut schedule: BTreeMap<u64, EdgeSet> = BTreeMap::new();
            if n > 1 {
                for w in intervals.windows(2) {
                    let (start, end) = (w[0], w[1]);
                    let mut order: Vec<usize> = (0..n).collect();
                    order.shuffle(&mut rng);
                    let mut edges: Vec<Edge> = (0..n).map(|p| (order[p], order[(p + 1) % n])).collect();
                    for _ in 0..n {
                        let i = rng.random_range(0..n);
                        edges.push((i, random_other(&mut rng, n, i)));
                    }
                    for e in edges {
                        let k = rng.random_range(start..end);
                        if k <= horizon {
                            schedule.entry(k).or_default().insert(e);
                        }
                    }
                }
            }
            let seq = GraphSequence::new(n, horizon, intervals, rule, schedule)?;
            let report = check_conditions(&seq);
            if !(report.c1_monotone && report.c3_ok) {
                return Err(GraphError::GenerationFailed {
                    window: report.c3_first_failure.unwrap_or(0) as u64,
                });
            }
            Ok(seq)
        }
        SequenceKind::Robust { r, period, sources } => {
            let period = *period;
            if period == 0 {
                return Err(GraphError::InvalidParameter("period must be >= 1".into()));
            }
            check_ids(sources, n)?;
            let source_set: BTreeSet<usize> = sources.iter().copied().collect();
            if source_set.len() != sources.len() {
                return Err(GraphError::InvalidParameter("duplicate source ids".into()));
            }
            if *r > n.saturating_sub(1) || *r > sources.len() {
                return Err(GraphError::InvalidParameter(format!(
                    "r = {r} needs r <= N-1 and r <= |S| = {}",
                    sources.len()
                )));
            }
            let rest: Vec<usize> = (0..n).filter(|i| !source_set.contains(i)).collect();
            let verify = rest.len() <= MAX_ROBUST_SUBSET;
            let rule = IntervalRule::Constant { period };
            let intervals = intervals_from_rule(&rule, n, horizon)?;
            let mut schedule: BTreeMap<u64, EdgeSet> = BTreeMap::new();
            let src: Vec<usize> = source_set.iter().copied().collect();
            for (w, win) in intervals.windows(2).enumerate() {
                let (start, end) = (win[0], win[1]);
                let complete = end - 1 <= horizon;
                let mut placed = None;
                for _ in 0..GENERATOR_RETRIES {
                    let mut edges: Vec<(u64, Edge)> = Vec::new();
                    for &i in &rest {
                        let mut pool = src.clone();
                        pool.shuffle(&mut rng);
                        for &s in pool.iter().take(*r) {
                            edges.push((rng.random_range(start..end), (s, i)));
                        }
                    }
                    if n > 1 {
                        for _ in 0..n {
                            let i = rng.random_range(0..n);
                            let j = random_other(&mut rng, n, i);
                            edges.push((rng.random_range(start..end), (i, j)));
                        }
                    }
                    let union: EdgeSet = edges.iter().map(|&(_, e)| e).collect();
                    if !complete || !verify || is_strongly_r_robust_wrt(&union, n, sources, *r)? {
                        placed = Some(edges);
                        break;
                    }
                }
                let edges = placed.ok_or(GraphError::GenerationFailed { window: w as u64 })?;
                for (k, e) in edges {
                    if k <= horizon {
                        schedule.entry(k).or_default().insert(e);
                    }
                }
            }
            GraphSequence::new(n, horizon, intervals, rule, schedule)
        }
    }
}

/// One edge `from → to` at every interval start `t_q ≤ horizon`.
pub fn pulse_sequence(
    rule: IntervalRule,
    from: usize,
    to: usize,
    n: usize,
    horizon: u64,
) -> Result<GraphSequence, GraphError> {
    let intervals = intervals_from_rule(&rule, n, horizon)?;
    let schedule = intervals
        .iter()
        .filter(|&&t| t <= horizon)
        .map(|&t| (t, EdgeSet::from([(from, to)])))
        .collect();
    GraphSequence::new(n, horizon, intervals, rule, schedule)
}

/// `G[k] = graphs[k mod len]`, declared with intervals of length `len`.
pub fn cyclic_sequence(graphs: &[Vec<Edge>], n: usize, horizon: u64) -> Result<GraphSequence, GraphError> {
    if graphs.is_empty() {
        return Err(GraphError::InvalidParameter("no graphs to cycle".into()));
    }
    let len = graphs.len() as u64;
    let rule = IntervalRule::Constant { period: len };
    let intervals = intervals_from_rule(&rule, n, horizon)?;
    let schedule = (0..=horizon)
        .map(|k| (k, graphs[(k % len) as usize].iter().copied().collect()))
        .collect();
    GraphSequence::new(n, horizon, intervals, rule, schedule)
}
