//! Freshness-index observer protocol.
//!
//! Every node keeps, for each sub-state j, an estimate `ẑ^(j)` and an index
//! `τ^(j)` counting how many steps that estimate lags the source of
//! sub-state j. The source (node j) runs a local observer and holds index 0.
//! Everybody else adopts the neighbor with the lowest index whenever it is
//! strictly fresher than what they hold, and otherwise runs open-loop.

use std::cmp::Ordering;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gains::{GainError, ObserverGainSet};
use crate::linalg;
use crate::lti::Decomposition;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("sub-state {0} has no gain")]
    MissingGain(usize),
    #[error("malformed broadcast from node {sender}: {reason}")]
    MalformedBroadcast { sender: usize, reason: String },
    #[error("node {node} is not the source of sub-state {substate}")]
    NotSource { node: usize, substate: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

impl From<GainError> for ProtocolError {
    fn from(e: GainError) -> Self {
        match e {
            GainError::MissingGain(j) => ProtocolError::MissingGain(j),
            other => ProtocolError::DimensionMismatch(other.to_string()),
        }
    }
}

/// `ω` (never informed) or a lag in steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreshnessIndex {
    Omega,
    Age(u64),
}

impl FreshnessIndex {
    pub fn is_triggered(self) -> bool {
        matches!(self, FreshnessIndex::Age(_))
    }

    pub fn age(self) -> Option<u64> {
        match self {
            FreshnessIndex::Age(a) => Some(a),
            FreshnessIndex::Omega => None,
        }
    }

    /// Strictly fresher than `other`. Any age is fresher than `ω`.
    pub fn fresher_than(self, other: FreshnessIndex) -> bool {
        match (self, other) {
            (FreshnessIndex::Age(a), FreshnessIndex::Age(b)) => a < b,
            (FreshnessIndex::Age(_), FreshnessIndex::Omega) => true,
            (FreshnessIndex::Omega, _) => false,
        }
    }

    fn cmp_age(self, other: FreshnessIndex) -> Ordering {
        match (self, other) {
            (FreshnessIndex::Age(a), FreshnessIndex::Age(b)) => a.cmp(&b),
            (FreshnessIndex::Age(_), FreshnessIndex::Omega) => Ordering::Less,
            (FreshnessIndex::Omega, FreshnessIndex::Age(_)) => Ordering::Greater,
            (FreshnessIndex::Omega, FreshnessIndex::Omega) => Ordering::Equal,
        }
    }
}

impl fmt::Display for FreshnessIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FreshnessIndex::Omega => write!(f, "w"),
            FreshnessIndex::Age(a) => write!(f, "{a}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubstateEstimate {
    pub tau: FreshnessIndex,
    pub z_hat: DVector<f64>,
}

/// Protocol state of one node: one entry per sub-state, empty blocks
/// included as zero-length vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub id: usize,
    pub substates: Vec<SubstateEstimate>,
}

/// What a node sends at step k: its state at the start of the step.
#[derive(Debug, Clone, PartialEq)]
pub struct Broadcast {
    pub sender: usize,
    pub substates: Vec<(FreshnessIndex, DVector<f64>)>,
}

impl NodeState {
    pub fn broadcast(&self) -> Broadcast {
        Broadcast {
            sender: self.id,
            substates: self.substates.iter().map(|s| (s.tau, s.z_hat.clone())).collect(),
        }
    }
}

/// A node switched its sub-state estimate to a neighbor's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Adoption {
    pub node: usize,
    pub substate: usize,
    pub from: usize,
}

/// Blocks of the transformed system and gains, precomputed once.
#[derive(Debug, Clone)]
pub struct AoiModel {
    dims: Vec<usize>,
    t: DMatrix<f64>,
    /// `A_jq` for `q ≤ j`.
    a_blocks: Vec<Vec<DMatrix<f64>>>,
    /// `F_jj = A_jj − L_j C_jj`.
    f_diag: Vec<DMatrix<f64>>,
    /// `G_jq = A_jq − L_j C_jq` for `q < j`.
    g_blocks: Vec<Vec<DMatrix<f64>>>,
    l: Vec<DMatrix<f64>>,
}

impl AoiModel {
    pub fn new(dec: &Decomposition, gains: &ObserverGainSet) -> Result<Self, ProtocolError> {
        let count = dec.node_count();
        if gains.gains.len() != count {
            return Err(ProtocolError::DimensionMismatch(format!(
                "{} gains for {count} sub-states",
                gains.gains.len()
            )));
        }
        let dims = dec.block_dims().to_vec();
        let mut a_blocks = Vec::with_capacity(count);
        let mut f_diag = Vec::with_capacity(count);
        let mut g_blocks = Vec::with_capacity(count);
        let mut l_all = Vec::with_capacity(count);
        #[allow(clippy::needless_range_loop)]
        for j in 0..count {
            a_blocks.push((0..=j).map(|q| dec.a_block(j, q)).collect::<Vec<_>>());
            if dims[j] == 0 {
                f_diag.push(DMatrix::zeros(0, 0));
                g_blocks.push(Vec::new());
                l_all.push(DMatrix::zeros(0, dec.c_bar(j).nrows()));
                continue;
            }
            let l = gains.gain(j)?.clone();
            if l.nrows() != dims[j] || l.ncols() != dec.c_bar(j).nrows() {
                return Err(ProtocolError::DimensionMismatch(format!(
                    "gain {j} is {}x{}, expected {}x{}",
                    l.nrows(),
                    l.ncols(),
                    dims[j],
                    dec.c_bar(j).nrows()
                )));
            }
            f_diag.push(dec.a_block(j, j) - &l * dec.c_block(j, j));
            g_blocks.push(
                (0..j)
                    .map(|q| dec.a_block(j, q) - &l * dec.c_block(j, q))
                    .collect(),
            );
            l_all.push(l);
        }
        Ok(Self {
            dims,
            t: dec.t().clone(),
            a_blocks,
            f_diag,
            g_blocks,
            l: l_all,
        })
    }

    pub fn block_dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn node_count(&self) -> usize {
        self.dims.len()
    }

    pub fn f_diag(&self, j: usize) -> &DMatrix<f64> {
        &self.f_diag[j]
    }

    pub fn a_block(&self, j: usize, q: usize) -> &DMatrix<f64> {
        &self.a_blocks[j][q]
    }

    /// Start state with the given sub-state estimates. Sources start at
    /// index 0, everyone else at `ω`.
    pub fn initial_state(&self, id: usize, z_hat: Vec<DVector<f64>>) -> Result<NodeState, ProtocolError> {
        if z_hat.len() != self.dims.len() || z_hat.iter().zip(&self.dims).any(|(z, &d)| z.len() != d) {
            return Err(ProtocolError::DimensionMismatch(
                "initial estimate blocks do not match the decomposition".into(),
            ));
        }
        Ok(NodeState {
            id,
            substates: z_hat
                .into_iter()
                .enumerate()
                .map(|(j, z)| SubstateEstimate {
                    tau: if j == id && self.dims[j] > 0 {
                        FreshnessIndex::Age(0)
                    } else {
                        FreshnessIndex::Omega
                    },
                    z_hat: z,
                })
                .collect(),
        })
    }

    /// `Σ_{q<j} A_jq ẑ^(q)` with the node's own upstream estimates.
    fn coupling(&self, own: &NodeState, j: usize) -> DVector<f64> {
        let mut acc = DVector::zeros(self.dims[j]);
        for q in 0..j {
            if self.dims[q] > 0 {
                acc += &self.a_blocks[j][q] * &own.substates[q].z_hat;
            }
        }
        acc
    }

    /// `F_jj ẑ^(j) + Σ_{q<j} G_jq ẑ^(q) + L_j y_j`, for node j only.
    pub fn source_update(&self, state: &NodeState, j: usize, y: &DVector<f64>) -> Result<DVector<f64>, ProtocolError> {
        if state.id != j || self.dims[j] == 0 {
            return Err(ProtocolError::NotSource {
                node: state.id,
                substate: j,
            });
        }
        if y.len() != self.l[j].ncols() {
            return Err(ProtocolError::DimensionMismatch(format!(
                "measurement of length {}, gain expects {}",
                y.len(),
                self.l[j].ncols()
            )));
        }
        let mut next = &self.f_diag[j] * &state.substates[j].z_hat + &self.l[j] * y;
        for q in 0..j {
            if self.dims[q] > 0 {
                next += &self.g_blocks[j][q] * &state.substates[q].z_hat;
            }
        }
        Ok(next)
    }

    fn check_broadcast(&self, b: &Broadcast) -> Result<(), ProtocolError> {
        if b.substates.len() != self.dims.len() {
            return Err(ProtocolError::MalformedBroadcast {
                sender: b.sender,
                reason: format!("{} blocks, expected {}", b.substates.len(), self.dims.len()),
            });
        }
        for (j, (_, z)) in b.substates.iter().enumerate() {
            if z.len() != self.dims[j] {
                return Err(ProtocolError::MalformedBroadcast {
                    sender: b.sender,
                    reason: format!("block {j} has length {}, expected {}", z.len(), self.dims[j]),
                });
            }
        }
        Ok(())
    }

    /// One non-source update of sub-state j. Returns the new index, the new
    /// estimate and the neighbor adopted, if any.
    pub fn nonsource_update(
        &self,
        state: &NodeState,
        j: usize,
        inbox: &[Broadcast],
    ) -> Result<(FreshnessIndex, DVector<f64>, Option<usize>), ProtocolError> {
        for b in inbox {
            self.check_broadcast(b)?;
        }
        let own_tau = state.substates[j].tau;
        // lowest index among triggered neighbors, ties to the lowest id
        let best = inbox
            .iter()
            .filter(|b| b.substates[j].0.is_triggered())
            .min_by(|a, b| a.substates[j].0.cmp_age(b.substates[j].0).then(a.sender.cmp(&b.sender)));
        let adopt = match (own_tau, best) {
            (_, None) => None,
            (FreshnessIndex::Omega, Some(b)) => Some(b),
            (FreshnessIndex::Age(_), Some(b)) => b.substates[j].0.fresher_than(own_tau).then_some(b),
        };
        let coupling = self.coupling(state, j);
        let a_jj = &self.a_blocks[j][j];
        Ok(match adopt {
            Some(b) => {
                let tau = match b.substates[j].0 {
                    FreshnessIndex::Age(a) => FreshnessIndex::Age(a + 1),
                    FreshnessIndex::Omega => unreachable!("only triggered neighbors are adopted"),
                };
                (tau, a_jj * &b.substates[j].1 + coupling, Some(b.sender))
            }
            None => {
                let tau = match own_tau {
                    FreshnessIndex::Omega => FreshnessIndex::Omega,
                    FreshnessIndex::Age(a) => FreshnessIndex::Age(a + 1),
                };
                (tau, a_jj * &state.substates[j].z_hat + coupling, None)
            }
        })
    }

    /// Full update of one node for one step.
    pub fn step_node(
        &self,
        state: &NodeState,
        y: &DVector<f64>,
        inbox: &[Broadcast],
    ) -> Result<(NodeState, Vec<Adoption>), ProtocolError> {
        let mut next = state.clone();
        let mut adoptions = Vec::new();
        for j in 0..self.dims.len() {
            if self.dims[j] == 0 {
                continue;
            }
            if j == state.id {
                next.substates[j].z_hat = self.source_update(state, j, y)?;
                next.substates[j].tau = FreshnessIndex::Age(0);
            } else {
                let (tau, z, from) = self.nonsource_update(state, j, inbox)?;
                next.substates[j].tau = tau;
                next.substates[j].z_hat = z;
                if let Some(from) = from {
                    adoptions.push(Adoption {
                        node: state.id,
                        substate: j,
                        from,
                    });
                }
            }
        }
        Ok((next, adoptions))
    }

    /// `x̂ = T · [ẑ^(1); ...; ẑ^(N)]`.
    pub fn full_estimate(&self, state: &NodeState) -> DVector<f64> {
        let z: Vec<DVector<f64>> = state.substates.iter().map(|s| s.z_hat.clone()).collect();
        &self.t * linalg::concat_vectors(&z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gains::{design_gains, GainRequest};
    use crate::lti::{decompose, LtiSystem};

    fn scalar_model(a: f64) -> AoiModel {
        let sys = LtiSystem::scalar(a, &[1.0, 0.0, 0.0]).unwrap();
        let dec = decompose(&sys).unwrap();
        let gains = design_gains(&dec, GainRequest::Nilpotent, 0).unwrap();
        AoiModel::new(&dec, &gains).unwrap()
    }

    fn v(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    fn empty() -> DVector<f64> {
        DVector::zeros(0)
    }

    fn bcast(sender: usize, tau: FreshnessIndex, z: f64) -> Broadcast {
        Broadcast {
            sender,
            substates: vec![(tau, v(z)), (FreshnessIndex::Omega, empty()), (FreshnessIndex::Omega, empty())],
        }
    }

    #[test]
    fn deadbeat_source_tracks_exactly() {
        let m = scalar_model(2.0);
        let s = m.initial_state(0, vec![v(7.0), empty(), empty()]).unwrap();
        let x = 3.0;
        let next = m.source_update(&s, 0, &v(x)).unwrap();
        assert_eq!(next[0], 2.0 * x);
    }

    #[test]
    fn untriggered_node_adopts_source() {
        let m = scalar_model(2.0);
        let s = m.initial_state(1, vec![v(-1.0), empty(), empty()]).unwrap();
        assert_eq!(s.substates[0].tau, FreshnessIndex::Omega);
        let (tau, z, from) = m
            .nonsource_update(&s, 0, &[bcast(0, FreshnessIndex::Age(0), 5.0)])
            .unwrap();
        assert_eq!(tau, FreshnessIndex::Age(1));
        assert_eq!(z[0], 10.0);
        assert_eq!(from, Some(0));
    }

    #[test]
    fn no_neighbors_runs_open_loop() {
        let m = scalar_model(2.0);
        let s = m.initial_state(2, vec![v(1.5), empty(), empty()]).unwrap();
        let (tau, z, from) = m.nonsource_update(&s, 0, &[]).unwrap();
        assert_eq!(tau, FreshnessIndex::Omega);
        assert_eq!(z[0], 3.0);
        assert_eq!(from, None);
        let omega_only = [bcast(1, FreshnessIndex::Omega, 9.0)];
        assert_eq!(m.nonsource_update(&s, 0, &omega_only).unwrap().0, FreshnessIndex::Omega);
    }

    #[test]
    fn triggered_node_adopts_only_strictly_fresher() {
        let m = scalar_model(2.0);
        let mut s = m.initial_state(2, vec![v(0.0), empty(), empty()]).unwrap();
        s.substates[0].tau = FreshnessIndex::Age(4);
        let inbox = [bcast(1, FreshnessIndex::Age(5), 1.0), bcast(0, FreshnessIndex::Age(3), 2.0)];
        let (tau, z, from) = m.nonsource_update(&s, 0, &inbox).unwrap();
        assert_eq!((tau, from), (FreshnessIndex::Age(4), Some(0)));
        assert_eq!(z[0], 4.0);

        let stale = [bcast(1, FreshnessIndex::Age(4), 1.0)];
        let (tau, _, from) = m.nonsource_update(&s, 0, &stale).unwrap();
        assert_eq!((tau, from), (FreshnessIndex::Age(5), None));
    }

    #[test]
    fn ties_go_to_lowest_id() {
        let m = scalar_model(1.0);
        let s = m.initial_state(2, vec![v(0.0), empty(), empty()]).unwrap();
        let inbox = [bcast(1, FreshnessIndex::Age(2), 1.0), bcast(0, FreshnessIndex::Age(2), 2.0)];
        assert_eq!(m.nonsource_update(&s, 0, &inbox).unwrap().2, Some(0));
    }

    #[test]
    fn malformed_broadcast_rejected() {
        let m = scalar_model(2.0);
        let s = m.initial_state(1, vec![v(0.0), empty(), empty()]).unwrap();
        let bad = Broadcast {
            sender: 0,
            substates: vec![(FreshnessIndex::Age(0), v(1.0))],
        };
        assert!(matches!(
            m.nonsource_update(&s, 0, &[bad]),
            Err(ProtocolError::MalformedBroadcast { .. })
        ));
    }

    #[test]
    fn source_update_only_for_source() {
        let m = scalar_model(2.0);
        let s = m.initial_state(1, vec![v(0.0), empty(), empty()]).unwrap();
        assert!(m.source_update(&s, 0, &v(0.0)).is_err());
    }

    #[test]
    fn omega_ordering() {
        use FreshnessIndex::*;
        assert!(Age(7).fresher_than(Omega));
        assert!(!Omega.fresher_than(Age(7)));
        assert!(!Age(3).fresher_than(Age(3)));
        assert_eq!(Omega.to_string(), "w");
    }
}
