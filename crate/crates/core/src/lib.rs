//! Off-policy evaluation for contextual bandits from logged decision data.
//!
//! Standard importance-sampling estimators require the logging policy to put
//! positive probability on every action everywhere. This crate implements an
//! estimator that also works when the logging policy is deterministic (or a
//! mix of deterministic and randomized segments): it measures, for each logged
//! record, the average probability the logging policy assigns each action over
//! a small ball around the record's context — the *approximate propensity
//! score* (APS) — by brute-force simulation. Records whose pairwise APS share
//! lies strictly between 0 and 1 sit near a decision boundary (or inside a
//! randomized segment) and identify mean reward differences between actions;
//! a per-pair least-squares fit with the APS share as a control recovers those
//! differences, and a plug-in formula turns them into the value of any
//! counterfactual policy.
//!
//! Modules:
//! - [`data`]: log datasets, context normalization, CSV ingestion.
//! - [`policy`]: declarative, simulatable policy specifications.
//! - [`aps`]: uniform ball sampling and the simulated propensity table.
//! - [`estimator`]: subsample selection, pairwise fits, value estimates,
//!   baselines.
//! - [`simlab`]: synthetic data-generating processes and Monte-Carlo
//!   evaluation of the estimators against closed-form true values.

pub mod aps;
pub mod data;
pub mod estimator;
pub mod linalg;
pub mod numeric;
pub mod policy;
pub mod rng;
pub mod simlab;
pub mod special;

pub use aps::{compute_aps, k_profile, ApsError, ApsTable, BallSampler};
pub use data::{
    load_csv, normalize_contexts, write_csv, ContextMatrix, CsvSchema, DataError, LoadedLog,
    LogDataset, MissingPolicy,
};
pub use estimator::{
    baseline_direct_method, baseline_mean_difference, effect_ratio, estimate_value,
    evaluate_policy_value, fit_pairwise, resolve_betas, select_subsample, EstimatorError,
    PairwiseFit, SampleRestriction, ValueEstimate,
};
pub use policy::{fit_linear_reward_model, train_ucb, PolicyError, PolicySpec, PredictionModel};
pub use rng::RngPlan;
pub use simlab::{
    run_experiment, DgpSpec, EffectMode, EstimatorKind, Experiment, McReport, Replication, Study,
};
