//! Synthetic experiments with known ground truth.
//!
//! Two experiment families over 100 correlated Gaussian context features and
//! 5 actions:
//!
//! - **Exp1** logs with a mix: a small randomized segment (contexts whose
//!   first feature exceeds its 99th percentile) and a deterministic greedy
//!   rule from a linear reward model everywhere else. The counterfactual
//!   policy is the same shape gated on the second feature with an
//!   independently trained model.
//! - **Exp2** logs with a deterministic decile-bucketed UCB policy trained on
//!   an auxiliary randomized sample; the counterfactual policy greedily
//!   follows a separately fitted reward model.
//!
//! Rewards are quadratic in the features, so a linear direct method is
//! misspecified by construction. In `Constant` mode the mean reward gap
//! between actions is constant (the per-action noise shifts means by
//! `a - 1`), which the value estimator assumes; `NonConstant` mode adds
//! action-specific quadratic terms that violate it.
//!
//! A study builds all shared state once (covariance factor, index vectors,
//! training sample, fitted models, the true counterfactual value), then
//! replications generate fresh logs and run each estimator. The true value
//! uses the closed-form mean of the baseline arm plus action shares of the
//! counterfactual policy estimated on a large fresh context draw.

use crate::aps::{compute_aps, ApsError};
use crate::data::{ContextMatrix, DataError, LogDataset};
use crate::estimator::{
    baseline_direct_method, baseline_mean_difference, resolve_betas, compute_shift_terms,
    EstimatorError, SampleRestriction,
};
use crate::numeric::{population_moments, quantile, CompensatedSum};
use crate::policy::{fit_linear_reward_model, train_ucb, PolicyError, PolicySpec, PredictionModel};
use crate::rng::RngPlan;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

/// Number of context features in the synthetic generator.
pub const CONTEXT_DIM: usize = 100;
/// Number of actions.
pub const ACTION_COUNT: usize = 5;

/// Rows of the covariance factor carrying off-diagonal mass (0-based).
const CORRELATED_ROWS: [usize; 5] = [1, 2, 3, 4, 5];
/// Columns of the covariance factor carrying off-diagonal mass (0-based).
const CORRELATED_COLS: [usize; 3] = [34, 65, 77];
/// Leading coordinates whose baseline weight is tied to the action weights.
const TIED_PREFIX: usize = 50;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Aps(#[from] ApsError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Exp1,
    Exp2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectMode {
    Constant,
    NonConstant,
}

/// Which estimators a Monte-Carlo run evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Share-controlled pairwise fits plugged into the value formula.
    Aps,
    /// Mean differences on the fully randomized segment.
    MeanDiffAbSample,
    /// Mean differences on the full sample.
    MeanDiffFullSample,
    /// Linear regression direct method.
    DirectMethod,
}

impl EstimatorKind {
    pub fn label(&self) -> &'static str {
        match self {
            EstimatorKind::Aps => "aps",
            EstimatorKind::MeanDiffAbSample => "mean_diff_ab",
            EstimatorKind::MeanDiffFullSample => "mean_diff_full",
            EstimatorKind::DirectMethod => "direct_method",
        }
    }

    /// The comparison set reported for each experiment family.
    pub fn defaults_for(experiment: Experiment) -> Vec<EstimatorKind> {
        match experiment {
            Experiment::Exp1 => vec![
                EstimatorKind::Aps,
                EstimatorKind::MeanDiffAbSample,
                EstimatorKind::MeanDiffFullSample,
            ],
            Experiment::Exp2 => vec![EstimatorKind::Aps, EstimatorKind::DirectMethod],
        }
    }
}

/// Configuration of one synthetic study.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DgpSpec {
    pub experiment: Experiment,
    pub effect_mode: EffectMode,
    /// Log size per replication.
    pub n: usize,
    pub seed: u64,
    /// Auxiliary randomized training sample size.
    #[serde(default = "default_train_n")]
    pub train_n: usize,
    /// Simulation draws per propensity score.
    #[serde(default = "default_aps_draws")]
    pub aps_draws: usize,
    /// Fresh context draws for the ground-truth policy shares.
    #[serde(default = "default_truth_draws")]
    pub truth_draws: usize,
    /// Quantile of the gating feature defining the randomized segment.
    #[serde(default = "default_gate_quantile")]
    pub ab_gate_quantile: f64,
    #[serde(default = "default_ucb_exploration")]
    pub ucb_exploration: f64,
}

fn default_train_n() -> usize {
    10_000
}
fn default_aps_draws() -> usize {
    100
}
fn default_truth_draws() -> usize {
    1_000_000
}
fn default_gate_quantile() -> f64 {
    0.99
}
fn default_ucb_exploration() -> f64 {
    2.0
}

impl DgpSpec {
    pub fn new(experiment: Experiment, effect_mode: EffectMode, n: usize, seed: u64) -> Self {
        Self {
            experiment,
            effect_mode,
            n,
            seed,
            train_n: default_train_n(),
            aps_draws: default_aps_draws(),
            truth_draws: default_truth_draws(),
            ab_gate_quantile: default_gate_quantile(),
            ucb_exploration: default_ucb_exploration(),
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        if self.n == 0 {
            return Err(SimError::InvalidConfig("n must be positive".into()));
        }
        if self.aps_draws == 0 {
            return Err(SimError::InvalidConfig("aps_draws must be positive".into()));
        }
        if self.truth_draws == 0 {
            return Err(SimError::InvalidConfig(
                "truth_draws must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.ab_gate_quantile) {
            return Err(SimError::InvalidConfig(
                "ab_gate_quantile must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Covariance of the context law, kept in factored form for exact sampling.
#[derive(Debug, Clone)]
pub struct CovarianceModel {
    factor: Array2<f64>,
    sigma: Array2<f64>,
    /// Nonzero off-diagonal factor entries `(row, col, value)`.
    offdiag: Vec<(usize, usize, f64)>,
}

impl CovarianceModel {
    pub fn factor(&self) -> &Array2<f64> {
        &self.factor
    }

    pub fn sigma(&self) -> &Array2<f64> {
        &self.sigma
    }

    /// `X = V z` with `z` standard normal, so `Cov(X) = V V' = sigma`.
    pub fn sample_context_into(&self, rng: &mut ChaCha8Rng, z: &mut [f64], out: &mut [f64]) {
        for zj in z.iter_mut() {
            *zj = rng.sample(StandardNormal);
        }
        out.copy_from_slice(z);
        for &(i, j, v) in &self.offdiag {
            out[i] += v * z[j];
        }
    }

    /// Variance of the linear index `sum_k X_k alpha_k`, i.e. `alpha' sigma alpha`.
    pub fn index_variance(&self, alpha: &[f64]) -> f64 {
        let p = alpha.len();
        let mut acc = CompensatedSum::new();
        for i in 0..p {
            for j in 0..p {
                acc.add(alpha[i] * self.sigma[(i, j)] * alpha[j]);
            }
        }
        acc.total()
    }

    /// `E[X_k^2]` for each coordinate (the covariance diagonal).
    pub fn diagonal(&self) -> Vec<f64> {
        (0..CONTEXT_DIM).map(|k| self.sigma[(k, k)]).collect()
    }
}

/// Builds the context covariance: a symmetric factor with unit diagonal,
/// uniform(-1/2, 1/2) entries on a fixed sparse pattern, squared into a
/// positive semidefinite covariance.
pub fn build_sigma(rng: &mut ChaCha8Rng) -> CovarianceModel {
    let mut factor = Array2::<f64>::eye(CONTEXT_DIM);
    let mut offdiag = Vec::with_capacity(CORRELATED_ROWS.len() * CORRELATED_COLS.len() * 2);
    for &i in &CORRELATED_ROWS {
        for &j in &CORRELATED_COLS {
            let v: f64 = rng.gen::<f64>() - 0.5;
            factor[(i, j)] = v;
            factor[(j, i)] = v;
            offdiag.push((i, j, v));
            offdiag.push((j, i, v));
        }
    }
    let sigma = factor.dot(&factor);
    CovarianceModel {
        factor,
        sigma,
        offdiag,
    }
}

/// Baseline and per-action index weights, before and after scaling the index
/// variance to one.
#[derive(Debug, Clone)]
pub struct AlphaSet {
    pub alpha0: Vec<f64>,
    pub alpha_actions: Vec<Vec<f64>>,
    pub raw_alpha0: Vec<f64>,
    pub raw_alpha_actions: Vec<Vec<f64>>,
}

/// Draws the index weights: action weights uniform(-150, 200) everywhere,
/// baseline weights uniform(-100, 100) on the tail and tied to the action
/// average on the first half, then each vector scaled so its linear index
/// has unit variance under the covariance model.
pub fn draw_alphas(rng: &mut ChaCha8Rng, cov: &CovarianceModel) -> AlphaSet {
    let mut raw_alpha0 = vec![0.0; CONTEXT_DIM];
    for w in raw_alpha0.iter_mut().skip(TIED_PREFIX) {
        *w = rng.gen::<f64>() * 200.0 - 100.0;
    }
    let mut raw_alpha_actions = Vec::with_capacity(ACTION_COUNT);
    for _ in 0..ACTION_COUNT {
        let mut v = vec![0.0; CONTEXT_DIM];
        for w in v.iter_mut() {
            *w = rng.gen::<f64>() * 350.0 - 150.0;
        }
        raw_alpha_actions.push(v);
    }
    for j in 0..TIED_PREFIX {
        raw_alpha0[j] = raw_alpha_actions.iter().map(|v| v[j]).sum::<f64>() / ACTION_COUNT as f64;
    }

    let scale = |v: &[f64]| -> Vec<f64> {
        let sd = cov.index_variance(v).sqrt();
        v.iter().map(|x| x / sd).collect()
    };
    let alpha0 = scale(&raw_alpha0);
    let alpha_actions: Vec<Vec<f64>> = raw_alpha_actions.iter().map(|v| scale(v)).collect();
    AlphaSet {
        alpha0,
        alpha_actions,
        raw_alpha0,
        raw_alpha_actions,
    }
}

/// Randomized training log: uniform actions, attenuated quadratic rewards.
pub fn generate_training_sample(
    cov: &CovarianceModel,
    alphas: &AlphaSet,
    n: usize,
    plan: &RngPlan,
    tag: &str,
) -> Result<LogDataset, SimError> {
    let mut ctx_rng = plan.stream_for(0, &format!("{tag}-ctx"));
    let mut assign_rng = plan.stream_for(0, &format!("{tag}-assign"));
    let mut noise_rng = plan.stream_for(0, &format!("{tag}-noise"));

    let mut values = Array2::<f64>::zeros((n, CONTEXT_DIM));
    let mut z = vec![0.0; CONTEXT_DIM];
    let mut x = vec![0.0; CONTEXT_DIM];
    let mut actions = Vec::with_capacity(n);
    let mut rewards = Vec::with_capacity(n);
    for i in 0..n {
        cov.sample_context_into(&mut ctx_rng, &mut z, &mut x);
        for (j, &xj) in x.iter().enumerate() {
            values[(i, j)] = xj;
        }
        let a = assign_rng.gen_range(1..=ACTION_COUNT);
        let u: f64 = noise_rng.sample(StandardNormal);
        let eps: f64 = noise_rng.sample(StandardNormal);
        let mut y = CompensatedSum::new();
        for (j, &xj) in x.iter().enumerate() {
            y.add(xj * xj * (0.75 * alphas.alpha0[j] + 0.5 * alphas.alpha_actions[a - 1][j]));
        }
        rewards.push(y.total() + 0.25 * u + 0.5 * eps);
        actions.push(a);
    }
    Ok(LogDataset::with_default_labels(
        ContextMatrix::from_continuous(values),
        actions,
        rewards,
        ACTION_COUNT,
    )?)
}

/// Shared state of one study: DGP parameters, fitted models, policies, and
/// the ground-truth value of the counterfactual policy.
pub struct Study {
    spec: DgpSpec,
    plan: RngPlan,
    cov: CovarianceModel,
    alphas: AlphaSet,
    training: LogDataset,
    model_ml: PredictionModel,
    model_pi: PredictionModel,
    /// Exp2 logging policy (trained UCB table).
    ucb_policy: Option<PolicySpec>,
    true_value: f64,
    true_logging_value: f64,
    expected_pi_shares: Vec<f64>,
    expected_ml_shares: Vec<f64>,
}

/// One generated replication: the normalized log plus the policies in force.
pub struct Replication {
    pub dataset: LogDataset,
    pub ml: PolicySpec,
    pub pi: PolicySpec,
    pub plan: RngPlan,
}

impl Study {
    pub fn build(spec: &DgpSpec) -> Result<Study, SimError> {
        spec.validate()?;
        let plan = RngPlan::new(spec.seed);
        let cov = build_sigma(&mut plan.stream_for(0, "sigma"));
        let alphas = draw_alphas(&mut plan.stream_for(0, "alphas"), &cov);

        let training = generate_training_sample(&cov, &alphas, spec.train_n, &plan, "train-ml")?;
        let training_pi = generate_training_sample(&cov, &alphas, spec.train_n, &plan, "train-pi")?;
        let model_ml = fit_linear_reward_model(&training)?;
        let model_pi = fit_linear_reward_model(&training_pi)?;

        let ucb_policy = match spec.experiment {
            Experiment::Exp2 => Some(train_ucb(&training, spec.ucb_exploration, (0, 1))?),
            Experiment::Exp1 => None,
        };

        let mut study = Study {
            spec: spec.clone(),
            plan,
            cov,
            alphas,
            training,
            model_ml,
            model_pi,
            ucb_policy,
            true_value: f64::NAN,
            true_logging_value: f64::NAN,
            expected_pi_shares: Vec::new(),
            expected_ml_shares: Vec::new(),
        };
        study.compute_truth()?;
        Ok(study)
    }

    pub fn spec(&self) -> &DgpSpec {
        &self.spec
    }

    pub fn plan(&self) -> &RngPlan {
        &self.plan
    }

    pub fn covariance(&self) -> &CovarianceModel {
        &self.cov
    }

    pub fn alphas(&self) -> &AlphaSet {
        &self.alphas
    }

    pub fn training_sample(&self) -> &LogDataset {
        &self.training
    }

    /// True value of the counterfactual policy.
    pub fn true_value(&self) -> f64 {
        self.true_value
    }

    /// True value of the logging policy (useful as a separate oracle).
    pub fn true_logging_value(&self) -> f64 {
        self.true_logging_value
    }

    /// `E[pi(a|X)]` on the fresh truth draw, one entry per action.
    pub fn expected_pi_shares(&self) -> &[f64] {
        &self.expected_pi_shares
    }

    /// Closed-form mean of the baseline arm in constant mode:
    /// `0.75 sum_k Sigma_kk alpha0_k + E[eps(1)]`.
    pub fn baseline_arm_mean(&self) -> f64 {
        let diag = self.cov.diagonal();
        let mut acc = CompensatedSum::new();
        for (d, a0) in diag.iter().zip(&self.alphas.alpha0) {
            acc.add(d * a0);
        }
        0.75 * acc.total() + 1.0
    }

    /// Logging and counterfactual policies for a given raw context sample
    /// (Exp1 gates on per-sample quantiles; Exp2 policies are fixed).
    fn policies_for_sample(&self, raw: &Array2<f64>) -> (PolicySpec, PolicySpec) {
        match self.spec.experiment {
            Experiment::Exp1 => {
                let n = raw.nrows();
                let col = |j: usize| -> Vec<f64> { (0..n).map(|i| raw[(i, j)]).collect() };
                let q1 = quantile(&col(0), self.spec.ab_gate_quantile);
                let q2 = quantile(&col(1), self.spec.ab_gate_quantile);
                let ml = PolicySpec::QuantileGate {
                    gate_feature: 0,
                    gate_threshold: q1,
                    inside: Box::new(PolicySpec::Uniform { m: ACTION_COUNT }),
                    outside: Box::new(self.model_ml.to_greedy_policy()),
                };
                let pi = PolicySpec::QuantileGate {
                    gate_feature: 1,
                    gate_threshold: q2,
                    inside: Box::new(PolicySpec::Uniform { m: ACTION_COUNT }),
                    outside: Box::new(self.model_pi.to_greedy_policy()),
                };
                (ml, pi)
            }
            Experiment::Exp2 => (
                self.ucb_policy.clone().expect("UCB policy built for Exp2"),
                self.model_pi.to_greedy_policy(),
            ),
        }
    }

    /// Mean potential reward for each action at a raw context (noise means
    /// included): constant mode adds `a` to the shared quadratic index,
    /// non-constant mode adds an action-specific quadratic term.
    fn mean_potential_rewards(&self, x: &[f64], out: &mut [f64]) {
        let mut sq0 = CompensatedSum::new();
        for (j, &xj) in x.iter().enumerate() {
            sq0.add(xj * xj * self.alphas.alpha0[j]);
        }
        let base = 0.75 * sq0.total();
        match self.spec.effect_mode {
            EffectMode::Constant => {
                for (a, o) in out.iter_mut().enumerate() {
                    *o = base + (a + 1) as f64;
                }
            }
            EffectMode::NonConstant => {
                for (a, o) in out.iter_mut().enumerate() {
                    let mut sqa = CompensatedSum::new();
                    for (j, &xj) in x.iter().enumerate() {
                        sqa.add(xj * xj * self.alphas.alpha_actions[a][j]);
                    }
                    *o = base + sqa.total();
                }
            }
        }
    }

    /// Ground truth from a large fresh context draw: policy action shares and
    /// the exact (constant mode) or Monte-Carlo (non-constant mode) values.
    fn compute_truth(&mut self) -> Result<(), SimError> {
        let draws = self.spec.truth_draws;
        let (ml, pi) = match self.spec.experiment {
            Experiment::Exp1 => {
                // Pass 1: gate thresholds from the fresh draw itself.
                let mut rng = self.plan.stream_for(0, "truth");
                let mut z = vec![0.0; CONTEXT_DIM];
                let mut x = vec![0.0; CONTEXT_DIM];
                let mut x0 = Vec::with_capacity(draws);
                let mut x1 = Vec::with_capacity(draws);
                for _ in 0..draws {
                    self.cov.sample_context_into(&mut rng, &mut z, &mut x);
                    x0.push(x[0]);
                    x1.push(x[1]);
                }
                let q1 = quantile(&x0, self.spec.ab_gate_quantile);
                let q2 = quantile(&x1, self.spec.ab_gate_quantile);
                (
                    PolicySpec::QuantileGate {
                        gate_feature: 0,
                        gate_threshold: q1,
                        inside: Box::new(PolicySpec::Uniform { m: ACTION_COUNT }),
                        outside: Box::new(self.model_ml.to_greedy_policy()),
                    },
                    PolicySpec::QuantileGate {
                        gate_feature: 1,
                        gate_threshold: q2,
                        inside: Box::new(PolicySpec::Uniform { m: ACTION_COUNT }),
                        outside: Box::new(self.model_pi.to_greedy_policy()),
                    },
                )
            }
            Experiment::Exp2 => self.policies_for_sample(&Array2::zeros((0, CONTEXT_DIM))),
        };

        // Pass 2 regenerates the identical context stream.
        let mut rng = self.plan.stream_for(0, "truth");
        let mut z = vec![0.0; CONTEXT_DIM];
        let mut x = vec![0.0; CONTEXT_DIM];
        let mut probs_ml = vec![0.0; ACTION_COUNT];
        let mut probs_pi = vec![0.0; ACTION_COUNT];
        let mut rewards = vec![0.0; ACTION_COUNT];
        let mut share_ml = vec![CompensatedSum::new(); ACTION_COUNT];
        let mut share_pi = vec![CompensatedSum::new(); ACTION_COUNT];
        let mut value_ml = CompensatedSum::new();
        let mut value_pi = CompensatedSum::new();
        for _ in 0..draws {
            self.cov.sample_context_into(&mut rng, &mut z, &mut x);
            ml.evaluate_into(&x, &mut probs_ml)?;
            pi.evaluate_into(&x, &mut probs_pi)?;
            self.mean_potential_rewards(&x, &mut rewards);
            for a in 0..ACTION_COUNT {
                share_ml[a].add(probs_ml[a]);
                share_pi[a].add(probs_pi[a]);
                value_ml.add(probs_ml[a] * rewards[a]);
                value_pi.add(probs_pi[a] * rewards[a]);
            }
        }
        let d = draws as f64;
        self.expected_ml_shares = share_ml.iter().map(|s| s.total() / d).collect();
        self.expected_pi_shares = share_pi.iter().map(|s| s.total() / d).collect();

        match self.spec.effect_mode {
            EffectMode::Constant => {
                // V(pi) = E[Y(1)] + sum_a (a - 1) E[pi(a|X)] exactly.
                let base = self.baseline_arm_mean();
                let tail = |shares: &[f64]| -> f64 {
                    shares
                        .iter()
                        .enumerate()
                        .map(|(a, s)| a as f64 * s)
                        .sum::<f64>()
                };
                self.true_value = base + tail(&self.expected_pi_shares);
                self.true_logging_value = base + tail(&self.expected_ml_shares);
            }
            EffectMode::NonConstant => {
                self.true_value = value_pi.total() / d;
                self.true_logging_value = value_ml.total() / d;
            }
        }
        Ok(())
    }

    /// Generates the log data and in-force policies for replication `rep`.
    pub fn replication(&self, rep: u64) -> Result<Replication, SimError> {
        let rep_plan = self.plan.subplan("rep", rep);
        let n = self.spec.n;
        let mut ctx_rng = rep_plan.stream_for(0, "ctx");
        let mut raw = Array2::<f64>::zeros((n, CONTEXT_DIM));
        let mut z = vec![0.0; CONTEXT_DIM];
        let mut x = vec![0.0; CONTEXT_DIM];
        for i in 0..n {
            self.cov.sample_context_into(&mut ctx_rng, &mut z, &mut x);
            for (j, &xj) in x.iter().enumerate() {
                raw[(i, j)] = xj;
            }
        }

        let (ml, pi) = self.policies_for_sample(&raw);

        let mut assign_rng = rep_plan.stream_for(0, "assign");
        let mut noise_rng = rep_plan.stream_for(0, "noise");
        let mut probs = vec![0.0; ACTION_COUNT];
        let mut actions = Vec::with_capacity(n);
        let mut rewards = Vec::with_capacity(n);
        let mut row = vec![0.0; CONTEXT_DIM];
        for i in 0..n {
            for j in 0..CONTEXT_DIM {
                row[j] = raw[(i, j)];
            }
            ml.evaluate_into(&row, &mut probs)?;
            let u01: f64 = assign_rng.gen();
            let mut cum = 0.0;
            let mut action = ACTION_COUNT;
            for (a, &p) in probs.iter().enumerate() {
                cum += p;
                if u01 < cum {
                    action = a + 1;
                    break;
                }
            }

            let u: f64 = noise_rng.sample(StandardNormal);
            let mut sq0 = CompensatedSum::new();
            for (j, &xj) in row.iter().enumerate() {
                sq0.add(xj * xj * self.alphas.alpha0[j]);
            }
            let y = match self.spec.effect_mode {
                EffectMode::Constant => {
                    let zeta: f64 = noise_rng.sample(StandardNormal);
                    0.75 * sq0.total() + 0.25 * u + action as f64 + zeta
                }
                EffectMode::NonConstant => {
                    let mut sqa = CompensatedSum::new();
                    for (j, &xj) in row.iter().enumerate() {
                        sqa.add(xj * xj * self.alphas.alpha_actions[action - 1][j]);
                    }
                    0.75 * sq0.total() + sqa.total() + 0.25 * u
                }
            };
            actions.push(action);
            rewards.push(y);
        }

        let dataset = LogDataset::with_default_labels(
            ContextMatrix::from_continuous(raw),
            actions,
            rewards,
            ACTION_COUNT,
        )?
        .normalized()?;

        Ok(Replication {
            dataset,
            ml,
            pi,
            plan: rep_plan,
        })
    }
}

/// One row of the Monte-Carlo report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McRow {
    pub estimator: String,
    /// Bandwidth for the share-controlled estimator; `None` for baselines.
    pub delta: Option<f64>,
    pub bias: f64,
    pub sd: f64,
    pub rmse: f64,
    /// Mean informative-subsample size (sum over pairs) or segment size.
    pub avg_n: f64,
    /// Replications that errored for this estimator (excluded from stats).
    pub failures: usize,
    /// First failure message, when any replication failed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure_example: Option<String>,
}

/// Monte-Carlo evaluation report, one row per estimator x bandwidth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McReport {
    pub experiment: Experiment,
    pub effect_mode: EffectMode,
    pub n: usize,
    pub replications: usize,
    pub aps_draws: usize,
    pub seed: u64,
    pub true_value: f64,
    pub rows: Vec<McRow>,
}

impl McReport {
    pub fn row(&self, estimator: EstimatorKind, delta: Option<f64>) -> Option<&McRow> {
        self.rows.iter().find(|r| {
            r.estimator == estimator.label()
                && match (r.delta, delta) {
                    (Some(a), Some(b)) => (a - b).abs() < 1e-12,
                    (None, None) => true,
                    _ => false,
                }
        })
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "estimator,delta,bias,sd,rmse,avg_n,failures")?;
        for r in &self.rows {
            let delta = r.delta.map(|d| d.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.estimator, delta, r.bias, r.sd, r.rmse, r.avg_n, r.failures
            )?;
        }
        Ok(())
    }
}

enum CellOutcome {
    Ok { v_hat: f64, n_obs: f64 },
    Failed(String),
}

/// Runs `replications` independent logs through each estimator and
/// aggregates bias, spread, and root mean squared error against the study's
/// ground truth.
///
/// Replications execute in parallel on disjoint seed substreams; the
/// aggregation consumes them in index order so reports are deterministic
/// under any thread count. Per-replication estimator failures are counted
/// and excluded from the statistics, never silently dropped.
pub fn run_experiment(
    spec: &DgpSpec,
    estimators: &[EstimatorKind],
    deltas: &[f64],
    replications: usize,
) -> Result<McReport, SimError> {
    if replications < 2 {
        return Err(SimError::InvalidConfig(
            "need at least 2 replications".into(),
        ));
    }
    if estimators.is_empty() {
        return Err(SimError::InvalidConfig("no estimators requested".into()));
    }
    if estimators.contains(&EstimatorKind::Aps) && deltas.is_empty() {
        return Err(SimError::InvalidConfig(
            "the share-controlled estimator needs at least one bandwidth".into(),
        ));
    }
    for &d in deltas {
        if !(d > 0.0) {
            return Err(SimError::InvalidConfig(format!(
                "bandwidth must be positive, got {d}"
            )));
        }
    }

    let study = Study::build(spec)?;
    let outcomes: Vec<Vec<CellOutcome>> = (0..replications as u64)
        .into_par_iter()
        .map(|rep| replication_cells(&study, rep, estimators, deltas))
        .collect::<Result<_, _>>()?;

    let truth = study.true_value();
    let mut rows = Vec::new();
    let mut cell = 0usize;
    for est in estimators {
        let cell_deltas: Vec<Option<f64>> = match est {
            EstimatorKind::Aps => deltas.iter().map(|&d| Some(d)).collect(),
            _ => vec![None],
        };
        for delta in cell_deltas {
            let mut values = Vec::with_capacity(replications);
            let mut sizes = Vec::with_capacity(replications);
            let mut failures = 0usize;
            let mut failure_example = None;
            for rep_cells in &outcomes {
                match &rep_cells[cell] {
                    CellOutcome::Ok { v_hat, n_obs } => {
                        values.push(*v_hat);
                        sizes.push(*n_obs);
                    }
                    CellOutcome::Failed(msg) => {
                        failures += 1;
                        if failure_example.is_none() {
                            failure_example = Some(msg.clone());
                        }
                    }
                }
            }
            let (mean_v, var_v) = population_moments(&values);
            let bias = mean_v - truth;
            let sd = var_v.sqrt();
            rows.push(McRow {
                estimator: est.label().to_string(),
                delta,
                bias,
                sd,
                rmse: (bias * bias + sd * sd).sqrt(),
                avg_n: crate::numeric::mean(&sizes),
                failures,
                failure_example,
            });
            cell += 1;
        }
    }

    Ok(McReport {
        experiment: spec.experiment,
        effect_mode: spec.effect_mode,
        n: spec.n,
        replications,
        aps_draws: spec.aps_draws,
        seed: spec.seed,
        true_value: truth,
        rows,
    })
}

fn replication_cells(
    study: &Study,
    rep: u64,
    estimators: &[EstimatorKind],
    deltas: &[f64],
) -> Result<Vec<CellOutcome>, SimError> {
    let replication = study.replication(rep)?;
    let ds = &replication.dataset;
    let shifts = compute_shift_terms(ds, &replication.ml, &replication.pi)?;
    let mean_y = ds.mean_reward();
    let plug_in = |betas: &[f64]| -> f64 {
        let mut v = mean_y;
        for (b, s) in betas.iter().zip(&shifts) {
            v += b * s;
        }
        v
    };

    let mut cells = Vec::new();
    for est in estimators {
        match est {
            EstimatorKind::Aps => {
                for &delta in deltas {
                    let outcome = (|| -> Result<CellOutcome, SimError> {
                        let table = compute_aps(
                            ds,
                            &replication.ml,
                            delta,
                            study.spec.aps_draws,
                            &replication.plan,
                        )?;
                        match resolve_betas(ds, &table, true) {
                            Ok(resolution) => {
                                let betas: Vec<f64> =
                                    resolution.per_pair.iter().map(|r| r.beta_hat).collect();
                                let n_obs: usize =
                                    resolution.per_pair.iter().map(|r| r.n_sub).sum();
                                Ok(CellOutcome::Ok {
                                    v_hat: plug_in(&betas),
                                    n_obs: n_obs as f64,
                                })
                            }
                            Err(e) => Ok(CellOutcome::Failed(e.to_string())),
                        }
                    })();
                    cells.push(outcome?);
                }
            }
            EstimatorKind::MeanDiffAbSample | EstimatorKind::MeanDiffFullSample => {
                let restriction = match est {
                    EstimatorKind::MeanDiffAbSample => {
                        SampleRestriction::FullSupportRegion(&replication.ml)
                    }
                    _ => SampleRestriction::All,
                };
                let mut betas = Vec::with_capacity(ACTION_COUNT - 1);
                let mut region = ds.n() as f64;
                let mut failure = None;
                for a in 2..=ACTION_COUNT {
                    match baseline_mean_difference(ds, a, restriction) {
                        Ok(md) => {
                            region = md.n_region as f64;
                            betas.push(md.beta_hat);
                        }
                        Err(e) => {
                            failure = Some(e.to_string());
                            break;
                        }
                    }
                }
                cells.push(match failure {
                    Some(msg) => CellOutcome::Failed(msg),
                    None => CellOutcome::Ok {
                        v_hat: plug_in(&betas),
                        n_obs: region,
                    },
                });
            }
            EstimatorKind::DirectMethod => {
                cells.push(match baseline_direct_method(ds, &replication.pi) {
                    Ok(dm) => CellOutcome::Ok {
                        v_hat: dm.v_hat,
                        n_obs: ds.n() as f64,
                    },
                    Err(e) => CellOutcome::Failed(e.to_string()),
                });
            }
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(experiment: Experiment, mode: EffectMode, seed: u64) -> DgpSpec {
        DgpSpec {
            experiment,
            effect_mode: mode,
            n: 1200,
            seed,
            train_n: 2000,
            aps_draws: 40,
            truth_draws: 40_000,
            ab_gate_quantile: 0.99,
            ucb_exploration: 2.0,
        }
    }

    #[test]
    fn sigma_factor_has_unit_diagonal_and_symmetry() {
        let plan = RngPlan::new(1);
        let cov = build_sigma(&mut plan.stream_for(0, "sigma"));
        for k in 0..CONTEXT_DIM {
            assert_eq!(cov.factor()[(k, k)], 1.0);
        }
        for i in 0..CONTEXT_DIM {
            for j in 0..CONTEXT_DIM {
                assert!((cov.sigma()[(i, j)] - cov.sigma()[(j, i)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sigma_is_positive_semidefinite() {
        let plan = RngPlan::new(2);
        let cov = build_sigma(&mut plan.stream_for(0, "sigma"));
        let eigs = crate::linalg::symmetric_eigenvalues(cov.sigma().view());
        let min = eigs.last().copied().unwrap();
        assert!(min >= -1e-10, "minimum eigenvalue {min}");
    }

    #[test]
    fn sampled_contexts_match_factor_covariance() {
        // Spot-check a correlated pair and a diagonal entry by Monte Carlo.
        let plan = RngPlan::new(3);
        let cov = build_sigma(&mut plan.stream_for(0, "sigma"));
        let mut rng = plan.stream_for(0, "mc");
        let mut z = vec![0.0; CONTEXT_DIM];
        let mut x = vec![0.0; CONTEXT_DIM];
        let draws = 60_000;
        let (i, j) = (1, 34);
        let mut sum_ij = 0.0;
        let mut sum_ii = 0.0;
        for _ in 0..draws {
            cov.sample_context_into(&mut rng, &mut z, &mut x);
            sum_ij += x[i] * x[j];
            sum_ii += x[i] * x[i];
        }
        let got_ij = sum_ij / draws as f64;
        let got_ii = sum_ii / draws as f64;
        assert!((got_ij - cov.sigma()[(i, j)]).abs() < 0.05, "cov {got_ij}");
        assert!((got_ii - cov.sigma()[(i, i)]).abs() < 0.05, "var {got_ii}");
    }

    #[test]
    fn alpha_normalization_gives_unit_index_variance() {
        let plan = RngPlan::new(4);
        let cov = build_sigma(&mut plan.stream_for(0, "sigma"));
        let alphas = draw_alphas(&mut plan.stream_for(0, "alphas"), &cov);
        assert!((cov.index_variance(&alphas.alpha0) - 1.0).abs() < 1e-8);
        for v in &alphas.alpha_actions {
            assert!((cov.index_variance(v) - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn alpha_tie_rule_holds_on_prefix() {
        let plan = RngPlan::new(5);
        let cov = build_sigma(&mut plan.stream_for(0, "sigma"));
        let alphas = draw_alphas(&mut plan.stream_for(0, "alphas"), &cov);
        for j in 0..TIED_PREFIX {
            let avg = alphas
                .raw_alpha_actions
                .iter()
                .map(|v| v[j])
                .sum::<f64>()
                / ACTION_COUNT as f64;
            assert_eq!(alphas.raw_alpha0[j], avg);
        }
        // Tail is drawn independently, not tied.
        assert!(alphas.raw_alpha0[TIED_PREFIX] != 0.0);
    }

    #[test]
    fn alpha_draws_are_seed_deterministic() {
        let plan = RngPlan::new(6);
        let cov = build_sigma(&mut plan.stream_for(0, "sigma"));
        let a = draw_alphas(&mut plan.stream_for(0, "alphas"), &cov);
        let b = draw_alphas(&mut plan.stream_for(0, "alphas"), &cov);
        assert_eq!(a.alpha0, b.alpha0);
        assert_eq!(a.alpha_actions, b.alpha_actions);
    }

    #[test]
    fn training_sample_is_uniform_and_matches_analytic_mean() {
        let plan = RngPlan::new(7);
        let cov = build_sigma(&mut plan.stream_for(0, "sigma"));
        let alphas = draw_alphas(&mut plan.stream_for(0, "alphas"), &cov);
        let n = 20_000;
        let train = generate_training_sample(&cov, &alphas, n, &plan, "train-ml").unwrap();

        // Action marginal: binomial(n, 1/5); 4 sigma keeps the joint test over
        // five actions comfortably below a 0.1% false-alarm rate.
        let sigma_count = (n as f64 * 0.2 * 0.8).sqrt();
        for a in 1..=ACTION_COUNT {
            let count = train.actions.iter().filter(|&&x| x == a).count() as f64;
            assert!(
                (count - n as f64 / 5.0).abs() < 4.0 * sigma_count,
                "action {a}: {count}"
            );
        }

        // E[Y] = sum_k Sigma_kk (0.75 alpha0_k + 0.5 mean_a alpha_{a,k}).
        let diag = cov.diagonal();
        let mut want = CompensatedSum::new();
        for k in 0..CONTEXT_DIM {
            let mean_action =
                alphas.alpha_actions.iter().map(|v| v[k]).sum::<f64>() / ACTION_COUNT as f64;
            want.add(diag[k] * (0.75 * alphas.alpha0[k] + 0.5 * mean_action));
        }
        let got = train.mean_reward();
        // Var(Y) is order a few units; allow 4 MC sigmas with sd bound 3.
        let tol = 4.0 * 3.0 / (n as f64).sqrt();
        assert!(
            (got - want.total()).abs() < tol,
            "mean {got} vs analytic {}",
            want.total()
        );
    }

    #[test]
    fn training_sample_is_byte_deterministic() {
        let plan = RngPlan::new(8);
        let cov = build_sigma(&mut plan.stream_for(0, "sigma"));
        let alphas = draw_alphas(&mut plan.stream_for(0, "alphas"), &cov);
        let a = generate_training_sample(&cov, &alphas, 500, &plan, "train-ml").unwrap();
        let b = generate_training_sample(&cov, &alphas, 500, &plan, "train-ml").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn exp1_randomized_segment_is_about_one_percent() {
        let spec = small_spec(Experiment::Exp1, EffectMode::Constant, 9);
        let study = Study::build(&spec).unwrap();
        let replication = study.replication(0).unwrap();
        let ds = &replication.dataset;
        let mut x = vec![0.0; CONTEXT_DIM];
        let mut probs = vec![0.0; ACTION_COUNT];
        let mut randomized = 0usize;
        for i in 0..ds.n() {
            ds.contexts.policy_row_into(i, &mut x);
            replication.ml.evaluate_into(&x, &mut probs).unwrap();
            if probs.iter().all(|&p| p > 0.0) {
                randomized += 1;
            }
        }
        let frac = randomized as f64 / ds.n() as f64;
        assert!(
            (frac - 0.01).abs() < 0.01,
            "randomized fraction {frac}, expected about 0.01"
        );
    }

    #[test]
    fn constant_mode_logging_value_matches_logged_reward_mean() {
        // V(ML) from the analytic decomposition vs the mean logged reward of
        // a large replication; agreement within Monte Carlo noise.
        let mut spec = small_spec(Experiment::Exp1, EffectMode::Constant, 10);
        spec.n = 50_000;
        spec.truth_draws = 200_000;
        let study = Study::build(&spec).unwrap();
        let replication = study.replication(0).unwrap();
        let mean_y = replication.dataset.mean_reward();
        // sd(Y) is around 2; the analytic shares carry their own small error.
        let tol = 3.0 * 2.0 / (spec.n as f64).sqrt() + 0.02;
        assert!(
            (mean_y - study.true_logging_value()).abs() < tol,
            "mean logged reward {mean_y} vs analytic {}",
            study.true_logging_value()
        );
    }

    #[test]
    fn replications_are_deterministic_and_distinct() {
        let spec = small_spec(Experiment::Exp2, EffectMode::Constant, 11);
        let study = Study::build(&spec).unwrap();
        let a = study.replication(3).unwrap();
        let b = study.replication(3).unwrap();
        assert_eq!(a.dataset, b.dataset);
        let c = study.replication(4).unwrap();
        assert_ne!(a.dataset.rewards, c.dataset.rewards);
    }

    #[test]
    fn report_identity_and_monotone_subsample() {
        let spec = small_spec(Experiment::Exp1, EffectMode::Constant, 12);
        let deltas = [0.3, 1.0];
        let report = run_experiment(&spec, &[EstimatorKind::Aps], &deltas, 4).unwrap();
        assert_eq!(report.rows.len(), 2);
        for row in &report.rows {
            assert!(
                (row.rmse * row.rmse - (row.bias * row.bias + row.sd * row.sd)).abs() < 1e-10
            );
            assert_eq!(row.failures, 0);
        }
        // Informative subsample grows with the bandwidth (seed-averaged).
        let mut avg = std::collections::BTreeMap::new();
        for seed in 13..18 {
            let mut s = small_spec(Experiment::Exp1, EffectMode::Constant, seed);
            s.truth_draws = 20_000;
            let r = run_experiment(&s, &[EstimatorKind::Aps], &deltas, 3).unwrap();
            for row in &r.rows {
                *avg.entry(row.delta.unwrap().to_bits()).or_insert(0.0) += row.avg_n;
            }
        }
        let small = avg[&0.3f64.to_bits()];
        let large = avg[&1.0f64.to_bits()];
        assert!(
            small < large,
            "avg subsample should grow with bandwidth: {small} vs {large}"
        );
    }

    #[test]
    fn nonconstant_mode_runs_and_reports() {
        let mut spec = small_spec(Experiment::Exp2, EffectMode::NonConstant, 14);
        spec.truth_draws = 20_000;
        let estimators = EstimatorKind::defaults_for(Experiment::Exp2);
        let report = run_experiment(&spec, &estimators, &[0.5], 3).unwrap();
        assert_eq!(report.rows.len(), 2);
        for row in &report.rows {
            assert!(row.bias.is_finite());
            assert!(row.rmse.is_finite());
        }
    }
}
