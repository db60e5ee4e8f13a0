//! Conditional expectation reward (CER) laboratory over fully enumerable
//! tabular autoregressive policies.
//!
//! * [`policy`]: the tabular policy `π(a, s | q) = π(s | q) π(a | s, q)`.
//! * [`reward`]: exact, empirical and batched CER, exact-match and combined rewards.
//! * [`oracle`]: brute-force property checks and the Monte-Carlo error study.
//! * [`trainer`]: RLOO training and pass@1 evaluation.
//! * [`tasks`]: synthetic tasks and policy initializers.
//! * [`cli`]: the `cerlab` subcommands and file formats.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used by the command-line front end.

pub mod cli;
pub mod error;
pub mod oracle;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod scalar;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type PolicyParams64 = policy::PolicyParams<f64>;
pub type PolicyParams32 = policy::PolicyParams<f32>;
pub type RewardBatch64 = reward::RewardBatch<f64>;
pub type RewardBatch32 = reward::RewardBatch<f32>;
pub type TrainingRun64 = trainer::TrainingRun<f64>;
pub type LogProbGradient64 = policy::LogProbGradient<f64>;
