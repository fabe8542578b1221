//! Forward-only optimization with rotated polytopes and soft assignment.
//!
//! [`optimizer::run`] minimizes any [`objectives::Objective`] from loss
//! evaluations alone. The bundled objectives cover smooth and step-function
//! losses, quantized MLPs, MAX-SAT and CartPole policies;
//! [`baselines`] holds SPSA, ES and random search for comparison.

pub mod assignment;
pub mod baselines;
pub mod error;
pub mod geometry;
pub mod maxsat;
pub mod objectives;
pub mod optimizer;
pub mod rng;
pub mod rlenv;
pub mod schedule;
pub mod subspace;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    pub mod geometry {}
    #[doc = include_str!("../../../book/src/assignment.md")]
    pub mod assignment {}
    #[doc = include_str!("../../../book/src/optimizer.md")]
    pub mod optimizer {}
    #[doc = include_str!("../../../book/src/objectives.md")]
    pub mod objectives {}
    #[doc = include_str!("../../../book/src/maxsat.md")]
    pub mod maxsat {}
    #[doc = include_str!("../../../book/src/cartpole.md")]
    pub mod cartpole {}
    #[doc = include_str!("../../../book/src/baselines.md")]
    pub mod baselines {}
}
