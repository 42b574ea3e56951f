//! Market-consistent valuation of hybrid financial/insurance payoffs on
//! finite scenario trees.
//!
//! The engine evaluates payoffs that mix perfectly hedgeable market risk with
//! untraded insurance risk.  Classical premium principles (mean-variance,
//! standard deviation, semi-deviation, average value at risk, exponential)
//! are computed conditionally on partitions of a scenario tree; their
//! market-consistent extensions split the evaluation into an inner actuarial
//! step conditional on the terminal stock path and an outer risk-neutral
//! expectation.  Dual representations, dynamic backward recursions, a
//! discrete backward-stochastic-difference-equation solver, and an axiom
//! conformance harness round out the toolkit.
//!
//! Measure algebra and the linear/quadratic principles run in exact rational
//! arithmetic; square roots, exponentials and non-integer powers fall back to
//! floats with a documented comparison tolerance.

pub mod bsde;
pub mod duality;
pub mod dynamic;
pub mod error;
pub mod harness;
pub mod numeric;
pub mod principles;
pub mod tree;
pub mod twostep;

pub use error::{EvalError, Result};
pub use numeric::{NumericMode, Scalar};
pub use tree::{
    build_tree, cond_expectation, parse_tree_config, risk_neutral_measure, ConditionalValue,
    Density, ObservableSpec, Partition, Payoff, ScenarioTree, TreeBuilder, TreeConfig,
};
