use thiserror::Error;

use crate::mdp::ValidationReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index} out of range for {what} (bound {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("not a probability distribution: {0}")]
    NotADistribution(String),

    #[error("invalid MDP:\n{0}")]
    InvalidMdp(ValidationReport),

    #[error("solver error: {0}")]
    Solver(String),

    #[error("Markov chain is reducible ({closed_classes} closed classes, {transient} transient nodes)")]
    ReducibleChain {
        closed_classes: usize,
        transient: usize,
    },

    #[error("Markov chain is periodic with period {0}")]
    Periodic(usize),

    #[error("aggregate cell (s={state}, a={action}) of agent {agent} has zero stationary mass")]
    ZeroCellMass {
        agent: usize,
        state: usize,
        action: usize,
    },

    #[error("policy of agent {agent} never plays action {action} in local state {state}")]
    ExplorationViolation {
        agent: usize,
        state: usize,
        action: usize,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("instance too large for brute force: {0}")]
    TooLarge(String),

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("division by zero: {0}")]
    DivisionByZero(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
