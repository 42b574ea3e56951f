//! Error type shared across the valuation engine.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid tree configuration: {0}")]
    InvalidConfig(String),
    #[error("time index {0} outside the tree horizon")]
    UnknownTime(usize),
    #[error("block {block} has zero mass under the supplied density")]
    ZeroBlockMass { block: usize },
    #[error("incomplete financial market at {context}: {branches} branches for {instruments} instruments")]
    IncompleteMarket {
        context: String,
        branches: usize,
        instruments: usize,
    },
    #[error("arbitrage in the financial market at {context}: {reason}")]
    Arbitrage { context: String, reason: String },
    #[error("invalid principle specification: {0}")]
    InvalidSpec(String),
    #[error("quantile level must lie in (0, 1], got {0}")]
    InvalidLevel(String),
    #[error("set is not measurable with respect to the partition: {0}")]
    NotMeasurable(String),
    #[error("empty density set")]
    EmptySet,
    #[error("empty family of conditional values")]
    EmptyFamily,
    #[error("density band infeasible on block {block}: {reason}")]
    InfeasibleBand { block: usize, reason: String },
    #[error("numeraire stock {index} is not strictly positive on leaf {leaf}")]
    NonpositiveNumeraire { index: usize, leaf: usize },
    #[error("counterexample template invalid: {0}")]
    ConstructionFailed(String),
    #[error("lift precondition violated: {0}")]
    PreconditionViolated(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("singular projection at {context}: degenerate increment second moment")]
    SingularProjection { context: String },
    #[error("payoff depends on the traded stock coordinates: {0}")]
    NotPureInsurance(String),
    #[error("evaluation oracle failed: {0}")]
    OracleFailure(String),
    #[error("partition mismatch: {0}")]
    PartitionMismatch(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;
