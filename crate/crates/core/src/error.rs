use thiserror::Error;

use crate::aoi::ProtocolError;
use crate::gains::GainError;
use crate::graph::GraphError;
use crate::io::FormatError;
use crate::lti::LtiError;
use crate::scenario::ScenarioError;
use crate::sim::SimError;

/// Umbrella error for callers that do not care which layer failed.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Lti(#[from] LtiError),
    #[error(transparent)]
    Gain(#[from] GainError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Sim(#[from] SimError),
}
