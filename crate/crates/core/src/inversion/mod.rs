//! Objectives over image pixels and the optimiser that minimises them.

mod objective;
mod optimize;
mod priors;

pub use objective::{
    build_fmi_objective, build_gram_objective, build_pmci_objective, build_random_objective, objective_gradient,
    style_distance, Evaluation, Objective, Priors, StyleSetup, Term, TermKind,
};
pub use optimize::{init_image, optimize, InitMode, OptimizerConfig, RunResult, StepRule, TraceEntry};
pub use priors::{l2_prior, l2_prior_grad, tv_prior, tv_prior_grad};
