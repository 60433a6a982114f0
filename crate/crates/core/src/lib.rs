//! Risk-aware offline policy selection for finite MDPs.
//!
//! A fixed batch of transitions defines a Dirichlet posterior over
//! transition models. Candidate policies are scored by a Monte Carlo
//! estimate of the value at risk (or conditional value at risk) of their
//! performance under that posterior, with an order-statistic bracket that
//! certifies the quantile estimate, and the best-scoring candidate wins.

pub mod batch;
pub mod envs;
pub mod error;
pub mod harness;
pub mod mdp;
pub mod ope;
pub mod plot;
pub mod posterior;
pub mod risk;
pub mod seeding;
pub mod selection;

pub use error::{Error, Result};
