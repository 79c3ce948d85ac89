//! Finite-horizon Bayesian optimization of time-dependent oracles.
//!
//! The crate is organised bottom-up:
//!
//! * [`kernel`]: product covariance over action and time.
//! * [`gp`]: Gaussian-process posterior, marginal likelihood, rank-one extension.
//! * [`optimizer`]: box-constrained multistart projected-gradient ascent.
//! * [`acquisition`]: time-dependent EI / PI / UCB and the random baseline.
//! * [`lookahead`]: the recursive two-step lookahead expected payoff (r2LEY)
//!   acquisition with Monte-Carlo value and gradient estimators.
//! * [`testbed`]: synthetic and tabular time-dependent payoff functions.
//! * [`bench`]: the optimization loop, replications, regret and summaries.

pub mod acquisition;
pub mod bench;
pub mod error;
pub mod gp;
pub mod kernel;
pub mod lookahead;
pub mod optimizer;
pub mod rng;
pub mod testbed;

pub use error::{Error, Result};
pub use gp::{Dataset, Hyperparams, Point, PosteriorModel, PosteriorSummary};
pub use kernel::{KernelParams, TimeKernel};
pub use optimizer::BoxDomain;
