pub mod bandit_sim;
pub mod domain;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod instance;
pub mod reward_model;
pub mod seed;
pub mod theory_check;
pub mod tuning;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/logs-and-policies.md")]
    mod logs_and_policies {}
    #[doc = include_str!("../../../book/src/estimators.md")]
    mod estimators {}
    #[doc = include_str!("../../../book/src/tuning.md")]
    mod tuning {}
    #[doc = include_str!("../../../book/src/reward-models.md")]
    mod reward_models {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/theory.md")]
    mod theory {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
