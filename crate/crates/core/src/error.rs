use thiserror::Error;

/// Errors raised by the numerical laboratory.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("point lies outside the domain: {0}")]
    OutsideDomain(String),

    #[error("history has reached the domain boundary")]
    BoundaryReached,

    #[error("grid step violates the stability condition: {0}")]
    Cfl(String),

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("policy iteration cycled; last residuals {0:?}")]
    PolicyCycling(Vec<f64>),

    #[error("ellipticity violated at node {node}: {detail}")]
    EllipticityViolation { node: usize, detail: String },

    #[error("payoff not supported by this solver: {0}")]
    UnsupportedPayoff(String),

    #[error("not supported: {0}")]
    Unsupported(String),

    #[error("policy returned a control outside the bands: {0}")]
    PolicyOutOfBounds(String),

    #[error("value fields live on different grids")]
    GridMismatch,

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("at node {node}: {source}")]
    Node {
        node: String,
        #[source]
        source: Box<LabError>,
    },
}

pub type Result<T> = std::result::Result<T, LabError>;

impl LabError {
    pub(crate) fn at_node(self, node: impl Into<String>) -> Self {
        LabError::Node {
            node: node.into(),
            source: Box::new(self),
        }
    }

    /// True when the error reflects a numerical failure rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            LabError::Cfl(_)
            | LabError::NonConvergence { .. }
            | LabError::PolicyCycling(_)
            | LabError::EllipticityViolation { .. } => true,
            LabError::Node { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
