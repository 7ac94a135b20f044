//! Optimal trading in a limit order book with resilient bid/ask prices.
//!
//! An investor with exponential utility trades a single asset whose best bid
//! and ask react to her orders: a buy lifts the ask by η per share, a sell
//! depresses the bid, and the two quotes revert towards each other at rate κ.
//! Under arithmetic Brownian prices the problem collapses to a deterministic
//! one: track the Merton position m = μ/(ασ²) as cheaply as possible, where
//! "cheap" weighs spread and impact costs against the squared tracking error.
//!
//! The crate covers that problem end to end:
//!
//! * [`model`] evaluates spreads, liquidity costs, the tracking objective and
//!   liquidation wealth for arbitrary block strategies on a time grid.
//! * [`boundary`] computes the free boundaries φ_sell and φ_buy that split the
//!   state space (τ, ζ, φ) into sell, wait and buy regions, together with all
//!   auxiliary curves, flow maps and duration solvers behind them.
//! * [`policy`] classifies a state and synthesizes the exact optimal strategy
//!   as a short list of closed-form segments: an optional initial block, buy
//!   and sell flows that slide along the boundaries, waiting phases, and a
//!   final liquidating block.
//! * [`subgrad`] evaluates the buy/sell subgradients of the cost functional
//!   and checks first-order optimality along any synthesized strategy.
//! * [`oracle`] provides independent checks: a projected-gradient minimizer
//!   over discretized strategies and a Monte Carlo estimator of expected
//!   utility.
//!
//! Everything is plain `f64` arithmetic; trajectories are represented as sums
//! of exponentials ([`mix::ExpMix`]) so that every integral the verification
//! layer needs has a closed form.

pub mod boundary;
pub mod mix;
pub mod model;
pub mod oracle;
pub mod policy;
pub mod roots;
pub mod subgrad;

pub use boundary::FreeBoundary;
pub use model::{GridStrategy, MarketParams, SpreadState, State};
pub use policy::{PiecewiseStrategy, Region, Segment};
pub use subgrad::{FocReport, SubgradPair};

/// Errors shared by all modules of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// A query time fell outside the strategy horizon.
    #[error("time {t} lies outside the horizon [0, {horizon}]")]
    OutsideHorizon { t: f64, horizon: f64 },

    /// Two redundant computations of the same quantity disagreed, which
    /// signals a bug rather than bad input.
    #[error("internal consistency check failed: {0}")]
    Inconsistent(String),

    /// A root search or iteration failed to reach its target.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Strategy synthesis produced a segment that does not sit on its
    /// boundary within tolerance.
    #[error("strategy synthesis failed: {0}")]
    Synthesis(String),

    /// A strategy rebuilt from an intermediate state diverged from the tail
    /// of the original one.
    #[error("restart mismatch at t = {t}: max trajectory deviation {deviation:e}")]
    RestartMismatch { t: f64, deviation: f64 },

    /// JSON (de)serialization failed.
    #[error(transparent)]
    Json(#[from] serde_json::Error),

    /// A CSV document could not be parsed.
    #[error("csv parse error on line {line}: {msg}")]
    CsvParse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;
