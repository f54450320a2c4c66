use std::fmt;

use floe_core::assim::AssimError;
use floe_core::cn::CnError;
use floe_core::metrics::MetricsError;
use floe_core::render::RenderError;
use floe_core::{DemError, IoError};

/// Failure classes, each with its own exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration: exit 1.
    Usage(String),
    /// Unreadable, malformed or inconsistent inputs: exit 2.
    Data(String),
    /// Something diverged or could not be decomposed: exit 3.
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DemError> for CliError {
    fn from(e: DemError) -> Self {
        match e {
            DemError::OrderingViolation { .. } => CliError::Numerical(e.to_string()),
            DemError::InvalidTimeStep(_) | DemError::InvalidSystem(_) | DemError::PackingFailure { .. } => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CnError> for CliError {
    fn from(e: CnError) -> Self {
        match e {
            CnError::NonFiniteLoss { .. } | CnError::NonFiniteState { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<AssimError> for CliError {
    fn from(e: AssimError) -> Self {
        let mut inner = &e;
        while let AssimError::AtStep { source, .. } = inner {
            inner = source;
        }
        match inner {
            AssimError::NonFiniteMember { .. }
            | AssimError::SingularInnovationCovariance
            | AssimError::DecompositionFailure(_)
            | AssimError::Model(CnError::NonFiniteState { .. }) => CliError::Numerical(e.to_string()),
            AssimError::InvalidObservation(_) | AssimError::InvalidEnsemble(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Model(inner) => inner.into(),
            MetricsError::DegenerateSeries { .. } => CliError::Numerical(e.to_string()),
            MetricsError::BadHorizons => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<RenderError> for CliError {
    fn from(e: RenderError) -> Self {
        CliError::Usage(e.to_string())
    }
}
