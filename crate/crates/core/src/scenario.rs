//! Scenario files: a system, a graph sequence, a protocol and everything
//! needed to run it deterministically.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aoi::{AoiModel, ProtocolError};
use crate::gains::{design_gains, GainError, GainRequest, ObserverGainSet};
use crate::graph::{
    cyclic_sequence, generate_sequence, pulse_sequence, Edge, GraphError, GraphSequence, IntervalRule, SequenceKind,
};
use crate::io::{FormatError, GainFile, ScheduleFile, SystemFile, MAX_HORIZON, SCHEMA_VERSION};
use crate::lti::{decompose, Decomposition, LtiError, LtiSystem};
use crate::resilient::{validate_adversaries, AdversarySpec};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Lti(#[from] LtiError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Gain(#[from] GainError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

impl From<serde_json::Error> for ScenarioError {
    fn from(e: serde_json::Error) -> Self {
        ScenarioError::Format(e.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphSpec {
    Schedule(ScheduleFile),
    Generate(GenerateSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateSpec {
    #[serde(flatten)]
    pub kind: GeneratorKind,
    /// Defaults to the scenario seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GeneratorKind {
    PeriodicSc { period: u64 },
    GrowingSqrt,
    LinearGrowth { delta: f64 },
    Robust { r: usize, period: u64, sources: Vec<usize> },
    /// `G[k] = graphs[k mod len]`.
    Cyclic { graphs: Vec<Vec<[usize; 2]>> },
    /// A single edge at every interval start.
    Pulse { from: usize, to: usize, rule: IntervalRule },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GainSpec {
    Rate {
        rho: f64,
        #[serde(default)]
        delta: f64,
    },
    Nilpotent,
    Explicit(GainFile),
}

/// Luenberger gains of the measuring nodes in the scalar protocols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceGains {
    /// `l = a / c`: exact after one step.
    Deadbeat,
    /// `l = (a − ρ) / c`: error shrinks by `ρ` per step.
    Rate(f64),
    /// One gain per node; entries of non-measuring nodes are ignored.
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightRule {
    /// Equal weights over the in-neighbors and the node itself.
    Uniform,
    /// Weight one on the parent in a BFS tree of `G[k]` from `root`.
    Tree { root: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProtocolSpec {
    Aoi { gains: GainSpec },
    Resilient { source_gains: SourceGains },
    NaiveConsensus { weights: WeightRule, source_gains: SourceGains },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialEstimates {
    /// `x̂_i[0] = x[0] + N(0, I)` from the scenario seed.
    #[default]
    SeededNormal,
    Zero,
    /// One full-state vector per node.
    Explicit(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(rename = "$schema_version")]
    pub schema_version: u32,
    pub name: String,
    pub system: SystemFile,
    pub graph: GraphSpec,
    pub protocol: ProtocolSpec,
    #[serde(default)]
    pub f: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub adversaries: Vec<AdversarySpec>,
    /// Constant input added to the plant every step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disturbance: Option<Vec<f64>>,
    pub horizon: u64,
    #[serde(default)]
    pub seed: u64,
    /// Drawn from the seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub initial_estimates: InitialEstimates,
}

pub fn parse_scenario(text: &str) -> Result<ScenarioFile, ScenarioError> {
    let file: ScenarioFile = serde_json::from_str(text)?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(ScenarioError::Invalid(format!(
            "unsupported schema version {}",
            file.schema_version
        )));
    }
    Ok(file)
}

/// Scalar plant data for the resilient and consensus protocols.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarSetup {
    pub a: f64,
    pub c: Vec<f64>,
    /// Luenberger gain per node, 0 for nodes that do not measure.
    pub l: Vec<f64>,
    /// Nodes with `c_i ≠ 0`.
    pub sources: Vec<usize>,
}

impl ScalarSetup {
    pub fn is_source(&self, i: usize) -> bool {
        self.c[i] != 0.0
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum PreparedProtocol {
    Aoi {
        dec: Decomposition,
        gains: ObserverGainSet,
        model: AoiModel,
    },
    Resilient {
        scalar: ScalarSetup,
        f: usize,
        adversaries: Vec<AdversarySpec>,
    },
    Naive {
        scalar: ScalarSetup,
        weights: WeightRule,
    },
}

impl PreparedProtocol {
    pub fn name(&self) -> &'static str {
        match self {
            PreparedProtocol::Aoi { .. } => "aoi",
            PreparedProtocol::Resilient { .. } => "resilient",
            PreparedProtocol::Naive { .. } => "naive-consensus",
        }
    }
}

/// A validated scenario with all derived data in place.
#[derive(Debug, Clone)]
pub struct PreparedScenario {
    pub name: String,
    pub system: LtiSystem,
    pub graph: GraphSequence,
    pub protocol: PreparedProtocol,
    pub disturbance: Option<DVector<f64>>,
    pub horizon: u64,
    pub seed: u64,
    pub x0: DVector<f64>,
    pub initial_estimates: Vec<DVector<f64>>,
}

fn build_graph(spec: &GraphSpec, n: usize, horizon: u64, seed: u64) -> Result<GraphSequence, ScenarioError> {
    let seq = match spec {
        GraphSpec::Schedule(file) => {
            let seq = file.to_sequence()?;
            if seq.horizon() < horizon {
                return Err(ScenarioError::Invalid(format!(
                    "schedule ends at {} before the horizon {horizon}",
                    seq.horizon()
                )));
            }
            seq.truncated(horizon)?
        }
        GraphSpec::Generate(g) => {
            let seed = g.seed.unwrap_or(seed);
            match &g.kind {
                GeneratorKind::PeriodicSc { period } => {
                    generate_sequence(&SequenceKind::PeriodicSc { period: *period }, n, seed, horizon)?
                }
                GeneratorKind::GrowingSqrt => generate_sequence(&SequenceKind::GrowingSqrt, n, seed, horizon)?,
                GeneratorKind::LinearGrowth { delta } => {
                    generate_sequence(&SequenceKind::LinearGrowth { delta: *delta }, n, seed, horizon)?
                }
                GeneratorKind::Robust { r, period, sources } => generate_sequence(
                    &SequenceKind::Robust {
                        r: *r,
                        period: *period,
                        sources: sources.clone(),
                    },
                    n,
                    seed,
                    horizon,
                )?,
                GeneratorKind::Cyclic { graphs } => {
                    let graphs: Vec<Vec<Edge>> = graphs
                        .iter()
                        .map(|g| g.iter().map(|e| (e[0], e[1])).collect())
                        .collect();
                    cyclic_sequence(&graphs, n, horizon)?
                }
                GeneratorKind::Pulse { from, to, rule } => pulse_sequence(rule.clone(), *from, *to, n, horizon)?,
            }
        }
    };
    if seq.node_count() != n {
        return Err(ScenarioError::Invalid(format!(
            "graph has {} nodes, system has {n}",
            seq.node_count()
        )));
    }
    Ok(seq)
}

fn scalar_setup(sys: &LtiSystem, gains: &SourceGains) -> Result<ScalarSetup, ScenarioError> {
    if sys.state_dim() != 1 || sys.c_all().iter().any(|c| c.shape() != (1, 1)) {
        return Err(ScenarioError::Invalid(
            "this protocol needs a scalar plant with one scalar output per node".into(),
        ));
    }
    let a = sys.a()[(0, 0)];
    let c: Vec<f64> = sys.c_all().iter().map(|m| m[(0, 0)]).collect();
    let sources: Vec<usize> = (0..c.len()).filter(|&i| c[i] != 0.0).collect();
    let l = match gains {
        SourceGains::Deadbeat => c.iter().map(|&ci| if ci != 0.0 { a / ci } else { 0.0 }).collect(),
        SourceGains::Rate(rho) => {
            if !(rho.is_finite() && rho.abs() < 1.0) {
                return Err(ScenarioError::Invalid(format!("source rate {rho} must lie in (-1, 1)")));
            }
            c.iter()
                .map(|&ci| if ci != 0.0 { (a - rho) / ci } else { 0.0 })
                .collect()
        }
        SourceGains::Explicit(l) => {
            if l.len() != c.len() || l.iter().any(|v| !v.is_finite()) {
                return Err(ScenarioError::Invalid(format!(
                    "explicit source gains need {} finite entries",
                    c.len()
                )));
            }
            l.iter().zip(&c).map(|(&li, &ci)| if ci != 0.0 { li } else { 0.0 }).collect()
        }
    };
    Ok(ScalarSetup { a, c, l, sources })
}

fn finite_vector(v: &[f64], len: usize, what: &str) -> Result<DVector<f64>, ScenarioError> {
    if v.len() != len || v.iter().any(|x| !x.is_finite()) {
        return Err(ScenarioError::Invalid(format!("{what} needs {len} finite entries")));
    }
    Ok(DVector::from_column_slice(v))
}

impl ScenarioFile {
    pub fn prepare(&self) -> Result<PreparedScenario, ScenarioError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ScenarioError::Invalid(format!(
                "unsupported schema version {}",
                self.schema_version
            )));
        }
        if self.horizon == 0 || self.horizon > MAX_HORIZON {
            return Err(ScenarioError::Invalid(format!(
                "horizon {} not in 1..={MAX_HORIZON}",
                self.horizon
            )));
        }
        let system = self.system.to_system()?;
        let n = system.state_dim();
        let nodes = system.node_count();
        let graph = build_graph(&self.graph, nodes, self.horizon, self.seed)?;

        if !self.adversaries.is_empty() && !matches!(self.protocol, ProtocolSpec::Resilient { .. }) {
            return Err(ScenarioError::Invalid(
                "adversaries are only supported with the resilient protocol".into(),
            ));
        }
        let protocol = match &self.protocol {
            ProtocolSpec::Aoi { gains } => {
                let dec = decompose(&system)?;
                let gains = match gains {
                    GainSpec::Rate { rho, delta } => design_gains(
                        &dec,
                        GainRequest::Rate {
                            rho: *rho,
                            delta: *delta,
                        },
                        self.seed,
                    )?,
                    GainSpec::Nilpotent => design_gains(&dec, GainRequest::Nilpotent, self.seed)?,
                    GainSpec::Explicit(file) => file.to_gain_set(&dec)?,
                };
                let model = AoiModel::new(&dec, &gains)?;
                PreparedProtocol::Aoi { dec, gains, model }
            }
            ProtocolSpec::Resilient { source_gains } => {
                let scalar = scalar_setup(&system, source_gains)?;
                validate_adversaries(&self.adversaries, nodes, self.f)?;
                PreparedProtocol::Resilient {
                    scalar,
                    f: self.f,
                    adversaries: self.adversaries.clone(),
                }
            }
            ProtocolSpec::NaiveConsensus { weights, source_gains } => {
                if let WeightRule::Tree { root } = weights {
                    if *root >= nodes {
                        return Err(ScenarioError::Invalid(format!("tree root {root} out of range")));
                    }
                }
                PreparedProtocol::Naive {
                    scalar: scalar_setup(&system, source_gains)?,
                    weights: weights.clone(),
                }
            }
        };

        let disturbance = self
            .disturbance
            .as_ref()
            .map(|d| finite_vector(d, n, "disturbance"))
            .transpose()?;

        // x0 first, then the estimates, so adding estimates never moves x0
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let x0 = match &self.x0 {
            Some(v) => finite_vector(v, n, "x0")?,
            None => DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(&mut rng))),
        };
        let initial_estimates = match &self.initial_estimates {
            InitialEstimates::SeededNormal => (0..nodes)
                .map(|_| {
                    let noise: DVector<f64> = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(&mut rng)));
                    &x0 + noise
                })
                .collect(),
            InitialEstimates::Zero => vec![DVector::zeros(n); nodes],
            InitialEstimates::Explicit(rows) => {
                if rows.len() != nodes {
                    return Err(ScenarioError::Invalid(format!(
                        "{} initial estimates for {nodes} nodes",
                        rows.len()
                    )));
                }
                rows.iter()
                    .map(|r| finite_vector(r, n, "initial estimate"))
                    .collect::<Result<_, _>>()?
            }
        };

        Ok(PreparedScenario {
            name: self.name.clone(),
            system,
            graph,
            protocol,
            disturbance,
            horizon: self.horizon,
            seed: self.seed,
            x0,
            initial_estimates,
        })
    }
}
