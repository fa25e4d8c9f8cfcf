//! Resilient freshness-index protocol for scalar plants `x[k+1] = a x[k]`.
//!
//! A regular non-source node keeps up to `2f+1` slots, one per distinct
//! neighbor, each holding the last value heard from that neighbor, a copy of
//! its freshness index aged by one per step, and the step it was heard.
//! Once all slots are filled the node forward-propagates every slot value to
//! the current step, drops the `f` largest and `f` smallest, and runs the
//! survivor through the dynamics.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aoi::{FreshnessIndex, ProtocolError};

/// Freshness index as reported on the wire. Adversaries may report
/// anything, including negative values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportedIndex {
    Omega,
    Value(i64),
}

impl From<FreshnessIndex> for ReportedIndex {
    fn from(t: FreshnessIndex) -> Self {
        match t {
            FreshnessIndex::Omega => ReportedIndex::Omega,
            FreshnessIndex::Age(a) => ReportedIndex::Value(a as i64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarMessage {
    pub sender: usize,
    pub tau: ReportedIndex,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub node: usize,
    /// Value heard (`v`).
    pub value: f64,
    /// Aged copy of the sender's index (`d`).
    pub index: u64,
    /// Step the value was heard (`φ`).
    pub stamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResilientNodeState {
    pub tau: FreshnessIndex,
    pub x_hat: f64,
    pub slots: Vec<Slot>,
}

impl ResilientNodeState {
    pub fn nonsource(x_hat: f64) -> Self {
        Self {
            tau: FreshnessIndex::Omega,
            x_hat,
            slots: Vec::new(),
        }
    }

    pub fn source(x_hat: f64) -> Self {
        Self {
            tau: FreshnessIndex::Age(0),
            x_hat,
            slots: Vec::new(),
        }
    }

    /// Filled slot count.
    pub fn q(&self) -> usize {
        self.slots.len()
    }

    pub fn message(&self, sender: usize) -> ScalarMessage {
        ScalarMessage {
            sender,
            tau: self.tau.into(),
            value: self.x_hat,
        }
    }
}

/// `a x̂ + l (y − c x̂)`.
pub fn source_luenberger(x_hat: f64, y: f64, a: f64, c: f64, l: f64) -> f64 {
    a * x_hat + l * (y - c * x_hat)
}

/// Survivor after dropping the `f` largest and `f` smallest of `2f+1`
/// values.
pub fn trim_select(values: &[f64], f: usize) -> Result<f64, ProtocolError> {
    if values.len() != 2 * f + 1 {
        return Err(ProtocolError::DimensionMismatch(format!(
            "{} values for f = {f}, expected {}",
            values.len(),
            2 * f + 1
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Ok(sorted[f])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResilientStep {
    pub state: ResilientNodeState,
    /// Entries excluded by the sanity gate (forged index, non-finite value,
    /// repeated sender).
    pub dropped: usize,
}

fn scaled(a: f64, value: f64, elapsed: u64) -> f64 {
    value * a.powi(elapsed.min(i32::MAX as u64) as i32)
}

/// One step of a regular non-source node at time `k`.
pub fn resilient_nonsource_step(
    state: &ResilientNodeState,
    inbox: &[ScalarMessage],
    k: u64,
    a: f64,
    f: usize,
) -> ResilientStep {
    let cap = 2 * f + 1;
    let mut dropped = 0;
    // neighbors with index in ℕ, not ω, at most k
    let mut gate: BTreeMap<usize, (u64, f64)> = BTreeMap::new();
    for m in inbox {
        match m.tau {
            ReportedIndex::Omega => {}
            ReportedIndex::Value(t) if t >= 0 && (t as u64) <= k && m.value.is_finite() => {
                if gate.insert(m.sender, (t as u64, m.value)).is_some() {
                    dropped += 1;
                }
            }
            ReportedIndex::Value(_) => dropped += 1,
        }
    }

    let mut next = state.clone();
    let in_list = |node: usize, s: &ResilientNodeState| s.slots.iter().any(|sl| sl.node == node);
    let mut fresh: Vec<(u64, usize, f64)> = gate
        .iter()
        .filter(|(&l, _)| !in_list(l, state))
        .map(|(&l, &(t, v))| (t, l, v))
        .collect();
    fresh.sort_by(|x, y| x.0.cmp(&y.0).then(x.1.cmp(&y.1)));
    let new_slot = |(t, l, v): (u64, usize, f64)| Slot {
        node: l,
        value: v,
        index: t,
        stamp: k,
    };

    match state.tau {
        FreshnessIndex::Omega => {
            let need = cap - state.q();
            if fresh.len() < need {
                next.slots.extend(fresh.into_iter().map(new_slot));
                for s in &mut next.slots {
                    s.index += 1;
                }
                next.tau = FreshnessIndex::Omega;
                next.x_hat = a * state.x_hat;
                return ResilientStep { state: next, dropped };
            }
            next.slots.extend(fresh.into_iter().take(need).map(new_slot));
        }
        FreshnessIndex::Age(_) => {
            for s in &mut next.slots {
                if let Some(&(t, v)) = gate.get(&s.node) {
                    if t < s.index {
                        s.value = v;
                        s.index = t;
                        s.stamp = k;
                    }
                }
            }
            // keep the 2f+1 lowest (index, id) among current slots and
            // newcomers; survivors keep their positions
            let mut ranked: Vec<(u64, usize, Option<usize>)> = next
                .slots
                .iter()
                .enumerate()
                .map(|(p, s)| (s.index, s.node, Some(p)))
                .chain(fresh.iter().map(|&(t, l, _)| (t, l, None)))
                .collect();
            ranked.sort_by(|x, y| x.0.cmp(&y.0).then(x.1.cmp(&y.1)));
            ranked.truncate(cap);
            let kept: Vec<usize> = ranked.iter().filter_map(|r| r.2).collect();
            let mut vacated: Vec<usize> = (0..next.slots.len()).filter(|p| !kept.contains(p)).collect();
            vacated.sort_unstable();
            let newcomers: Vec<usize> = ranked.iter().filter(|r| r.2.is_none()).map(|r| r.1).collect();
            for (p, l) in vacated.into_iter().zip(newcomers) {
                let &(t, v) = gate.get(&l).expect("newcomer passed the gate");
                next.slots[p] = new_slot((t, l, v));
            }
        }
    }

    let max_index = next.slots.iter().map(|s| s.index).max().expect("slots are full");
    next.tau = FreshnessIndex::Age(max_index + 1);
    let propagated: Vec<f64> = next
        .slots
        .iter()
        .map(|s| scaled(a, s.value, k - s.stamp))
        .collect();
    let survivor = trim_select(&propagated, f).expect("slot count is 2f+1");
    for s in &mut next.slots {
        s.index += 1;
    }
    next.x_hat = a * survivor;
    ResilientStep { state: next, dropped }
}

/// Behavior of a Byzantine node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", content = "params", rename_all = "kebab-case")]
pub enum AdversaryStrategy {
    /// Sends nothing.
    Silent,
    /// Claims index 0 with a fixed value.
    ZeroIndexLie { value: f64 },
    /// Random index (sometimes forged) and value `x[k] + scale·U(−1, 1)`,
    /// drawn independently per receiver.
    RandomValue { scale: f64 },
    /// Claims index 0 with value `x[k] + bias`.
    ColludingBias { bias: f64 },
    /// Claims index 0 with the true state from `delay` steps ago.
    Replay { delay: u64 },
}

impl AdversaryStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            AdversaryStrategy::Silent => "silent",
            AdversaryStrategy::ZeroIndexLie { .. } => "zero-index-lie",
            AdversaryStrategy::RandomValue { .. } => "random-value",
            AdversaryStrategy::ColludingBias { .. } => "colluding-bias",
            AdversaryStrategy::Replay { .. } => "replay",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarySpec {
    pub node: usize,
    #[serde(flatten)]
    pub strategy: AdversaryStrategy,
}

/// At most `f` distinct, in-range adversarial nodes.
pub fn validate_adversaries(specs: &[AdversarySpec], n: usize, f: usize) -> Result<(), ProtocolError> {
    if specs.len() > f {
        return Err(ProtocolError::DimensionMismatch(format!(
            "{} adversaries exceed f = {f}",
            specs.len()
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    for s in specs {
        if s.node >= n {
            return Err(ProtocolError::DimensionMismatch(format!(
                "adversary node {} out of range for {n} nodes",
                s.node
            )));
        }
        if !seen.insert(s.node) {
            return Err(ProtocolError::DimensionMismatch(format!("adversary node {} listed twice", s.node)));
        }
    }
    Ok(())
}

/// Message an adversary sends to `receiver` at step `k`, or `None` when it
/// stays silent. `truth` is the plant trajectory `x[0..=k]`.
pub fn apply_adversary(
    strategy: &AdversaryStrategy,
    sender: usize,
    k: u64,
    truth: &[f64],
    rng: &mut ChaCha8Rng,
) -> Option<ScalarMessage> {
    let x_k = truth[k as usize];
    let msg = |tau: i64, value: f64| ScalarMessage {
        sender,
        tau: ReportedIndex::Value(tau),
        value,
    };
    match strategy {
        AdversaryStrategy::Silent => None,
        AdversaryStrategy::ZeroIndexLie { value } => Some(msg(0, *value)),
        AdversaryStrategy::ColludingBias { bias } => Some(msg(0, x_k + bias)),
        AdversaryStrategy::Replay { delay } => Some(msg(0, truth[k.saturating_sub(*delay) as usize])),
        AdversaryStrategy::RandomValue { scale } => {
            let tau = if rng.random_bool(0.2) {
                if rng.random_bool(0.5) {
                    -1
                } else {
                    k as i64 + 1 + rng.random_range(0..5)
                }
            } else {
                rng.random_range(0..=k) as i64
            };
            let value = x_k + scale * rng.random_range(-1.0..1.0);
            Some(msg(tau, value))
        }
    }
}
