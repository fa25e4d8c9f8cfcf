//! JSON file formats: system definitions, graph schedules and gain files.
//!
//! Matrices are row-major nested arrays. Node ids and time steps are 0-based.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gains::{GainError, GainMode, NormConstants, ObserverGainSet, RateChain};
use crate::graph::{intervals_from_rule, EdgeSet, GraphError, GraphSequence, IntervalRule, MAX_NODES};
use crate::lti::{Decomposition, LtiError, LtiSystem};

pub const SCHEMA_VERSION: u32 = 1;
pub const MAX_STATE_DIM: usize = 64;
pub const MAX_HORIZON: u64 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("line {line}, column {column}: {message}")]
    Json { line: usize, column: usize, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Lti(#[from] LtiError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Gain(#[from] GainError),
}

impl From<serde_json::Error> for FormatError {
    fn from(e: serde_json::Error) -> Self {
        FormatError::Json {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

pub fn matrix_from_rows(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>, FormatError> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if r == 0 || c == 0 {
        return Err(FormatError::Invalid(format!("{name} is empty")));
    }
    if r > MAX_STATE_DIM * MAX_NODES || c > MAX_STATE_DIM {
        return Err(FormatError::Invalid(format!("{name} is {r}x{c}, too large")));
    }
    if let Some(bad) = rows.iter().position(|row| row.len() != c) {
        return Err(FormatError::Invalid(format!(
            "{name} row {bad} has {} entries, expected {c}",
            rows[bad].len()
        )));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(FormatError::Invalid(format!("{name} has non-finite entries")));
    }
    Ok(DMatrix::from_row_slice(r, c, &flat))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// `{"A": [[...]], "C": [[[...]], ...], "labels": [...]}`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemFile {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    pub c: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

impl SystemFile {
    pub fn to_system(&self) -> Result<LtiSystem, FormatError> {
        let a = matrix_from_rows(&self.a, "A")?;
        if self.c.is_empty() || self.c.len() > MAX_NODES {
            return Err(FormatError::Invalid(format!(
                "C lists {} nodes, expected 1..={MAX_NODES}",
                self.c.len()
            )));
        }
        let c = self
            .c
            .iter()
            .enumerate()
            .map(|(i, rows)| matrix_from_rows(rows, &format!("C[{i}]")))
            .collect::<Result<Vec<_>, _>>()?;
        let sys = LtiSystem::new(a, c)?;
        Ok(match &self.labels {
            Some(l) => sys.with_labels(l.clone())?,
            None => sys,
        })
    }

    pub fn from_system(sys: &LtiSystem) -> Self {
        Self {
            a: matrix_to_rows(sys.a()),
            c: sys.c_all().iter().map(matrix_to_rows).collect(),
            labels: sys.labels().map(|l| l.to_vec()),
        }
    }
}

pub fn parse_system(text: &str) -> Result<LtiSystem, FormatError> {
    serde_json::from_str::<SystemFile>(text)?.to_system()
}

/// `{"N": 3, "horizon": 20, "intervals": [0, 2, ...], "edges": {"0": [[0, 1]], ...}}`.
/// Either `intervals` or `interval_rule` must be given. Without `horizon`,
/// the last explicit interval start minus one is used, or the last edge
/// step when the intervals come from a rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleFile {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intervals: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval_rule: Option<IntervalRule>,
    #[serde(default)]
    pub edges: BTreeMap<String, Vec<[usize; 2]>>,
}

impl ScheduleFile {
    pub fn to_sequence(&self) -> Result<GraphSequence, FormatError> {
        let mut schedule: BTreeMap<u64, EdgeSet> = BTreeMap::new();
        for (key, list) in &self.edges {
            let k: u64 = key
                .parse()
                .map_err(|_| FormatError::Invalid(format!("edge key {key:?} is not a time step")))?;
            if k > MAX_HORIZON {
                return Err(FormatError::Invalid(format!("edge step {k} exceeds {MAX_HORIZON}")));
            }
            schedule.entry(k).or_default().extend(list.iter().map(|e| (e[0], e[1])));
        }
        let last_edge = schedule.keys().next_back().copied().unwrap_or(0);
        let (intervals, rule, horizon) = match (&self.intervals, &self.interval_rule) {
            (Some(_), Some(_)) => {
                return Err(FormatError::Invalid(
                    "give either intervals or interval_rule, not both".into(),
                ))
            }
            (None, None) => return Err(FormatError::Invalid("missing intervals or interval_rule".into())),
            (Some(t), None) => {
                let last = *t.last().ok_or_else(|| FormatError::Invalid("intervals is empty".into()))?;
                let horizon = self.horizon.unwrap_or(last.saturating_sub(1));
                (t.clone(), IntervalRule::Explicit, horizon)
            }
            (None, Some(rule)) => {
                if *rule == IntervalRule::Explicit {
                    return Err(FormatError::Invalid("explicit rule needs an intervals list".into()));
                }
                let horizon = self.horizon.unwrap_or(last_edge);
                if horizon > MAX_HORIZON {
                    return Err(FormatError::Invalid(format!("horizon {horizon} exceeds {MAX_HORIZON}")));
                }
                (intervals_from_rule(rule, self.n, horizon)?, rule.clone(), horizon)
            }
        };
        if horizon > MAX_HORIZON {
            return Err(FormatError::Invalid(format!("horizon {horizon} exceeds {MAX_HORIZON}")));
        }
        Ok(GraphSequence::new(self.n, horizon, intervals, rule, schedule)?)
    }

    pub fn from_sequence(seq: &GraphSequence) -> Self {
        let (intervals, interval_rule) = match seq.rule() {
            IntervalRule::Explicit => (Some(seq.intervals().to_vec()), None),
            rule => (None, Some(rule.clone())),
        };
        Self {
            n: seq.node_count(),
            horizon: Some(seq.horizon()),
            intervals,
            interval_rule,
            edges: seq
                .schedule()
                .iter()
                .map(|(k, e)| (k.to_string(), e.iter().map(|&(i, j)| [i, j]).collect()))
                .collect(),
        }
    }
}

pub fn parse_schedule(text: &str) -> Result<GraphSequence, FormatError> {
    serde_json::from_str::<ScheduleFile>(text)?.to_sequence()
}

/// Designed gains together with the transform they were designed for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainFile {
    #[serde(rename = "$schema_version")]
    pub schema_version: u32,
    pub mode: GainMode,
    pub block_dims: Vec<usize>,
    #[serde(rename = "T")]
    pub t: Vec<Vec<f64>>,
    /// One entry per sub-state, `null` for empty blocks.
    #[serde(rename = "L")]
    pub l: Vec<Option<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<RateChain>,
    #[serde(default)]
    pub norm_constants: Vec<Option<NormConstants>>,
}

impl GainFile {
    pub fn new(dec: &Decomposition, gains: &ObserverGainSet) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            mode: gains.mode,
            block_dims: dec.block_dims().to_vec(),
            t: matrix_to_rows(dec.t()),
            l: gains.gains.iter().map(|g| g.as_ref().map(matrix_to_rows)).collect(),
            chain: gains.chain.clone(),
            norm_constants: gains.norm_constants.clone(),
        }
    }

    fn check_shape(&self) -> Result<(), FormatError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(FormatError::Invalid(format!(
                "unsupported schema version {}",
                self.schema_version
            )));
        }
        if self.l.len() != self.block_dims.len() {
            return Err(FormatError::Invalid(format!(
                "{} gains for {} sub-states",
                self.l.len(),
                self.block_dims.len()
            )));
        }
        for (j, (g, &d)) in self.l.iter().zip(&self.block_dims).enumerate() {
            match (g, d) {
                (None, 0) => {}
                (Some(_), 0) => return Err(FormatError::Invalid(format!("sub-state {j} is empty but has a gain"))),
                (None, _) => return Err(FormatError::Invalid(format!("sub-state {j} has no gain"))),
                (Some(rows), d) => {
                    let m = matrix_from_rows(rows, &format!("L[{j}]"))?;
                    if m.nrows() != d {
                        return Err(FormatError::Invalid(format!(
                            "L[{j}] has {} rows, sub-state dimension is {d}",
                            m.nrows()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Gain set for `dec`, which must match the stored block structure and
    /// transform.
    pub fn to_gain_set(&self, dec: &Decomposition) -> Result<ObserverGainSet, FormatError> {
        self.check_shape()?;
        if self.block_dims != dec.block_dims() {
            return Err(FormatError::Invalid(format!(
                "gain file blocks {:?} do not match the system's {:?}",
                self.block_dims,
                dec.block_dims()
            )));
        }
        let t = matrix_from_rows(&self.t, "T")?;
        if t.shape() != dec.t().shape() || (&t - dec.t()).amax() > 1e-9 {
            return Err(FormatError::Invalid(
                "gain file was designed for a different transform".into(),
            ));
        }
        let gains = self
            .l
            .iter()
            .map(|g| g.as_ref().map(|rows| matrix_from_rows(rows, "L")).transpose())
            .collect::<Result<Vec<_>, _>>()?;
        let mut norm_constants = self.norm_constants.clone();
        norm_constants.resize(gains.len(), None);
        Ok(ObserverGainSet {
            mode: self.mode,
            gains,
            chain: self.chain.clone(),
            norm_constants,
        })
    }
}

/// Parses and checks the internal consistency of a gain file.
pub fn parse_gain_file(text: &str) -> Result<GainFile, FormatError> {
    let file: GainFile = serde_json::from_str(text)?;
    file.check_shape()?;
    Ok(file)
}
