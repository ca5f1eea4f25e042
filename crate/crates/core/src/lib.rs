//! Treatment selection under guardrail constraints.
//!
//! Given a randomized experiment with several treatment arms and several
//! metrics, find a personalized assignment that maximizes one metric while
//! keeping the others within bounds. The crate covers the whole path:
//!
//! * [`data`]: experiment exports and honest splits.
//! * [`causal_tree`] and [`member`]: heterogeneous effect estimates at
//!   cohort or member level.
//! * [`merge`]: combining per-pair trees into one cohort partition.
//! * [`optimize`]: the stochastic solver for noisy cohort effects and the
//!   LP solver for point estimates.
//! * [`bootstrap`]: bias correction of cohort policies.
//! * [`simulate`]: synthetic data with counterfactuals and the method
//!   comparison.
//! * [`pipeline`]: configuration, policy files and scoring.
//!
//! The book in `book/` walks through each stage with runnable examples.

pub mod assemble;
pub mod bootstrap;
pub mod causal_tree;
pub mod cohort;
pub mod data;
pub mod error;
pub mod member;
pub mod merge;
pub mod methods;
pub mod optimize;
pub mod pipeline;
pub mod problem;
pub mod rng;
pub mod simulate;
pub mod stats;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/causal-trees.md")]
    mod causal_trees {}
    #[doc = include_str!("../../../book/src/merging.md")]
    mod merging {}
    #[doc = include_str!("../../../book/src/member-effects.md")]
    mod member_effects {}
    #[doc = include_str!("../../../book/src/optimization.md")]
    mod optimization {}
    #[doc = include_str!("../../../book/src/bootstrap.md")]
    mod bootstrap {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
