//! The off-policy value estimator and its baselines.
//!
//! For each non-baseline action `a`, the informative subsample is the set of
//! records assigned action 1 or `a` whose pairwise propensity share lies
//! strictly inside (0, 1) — records the logging policy could have sent either
//! way locally. A least-squares fit of reward on an intercept, the action
//! indicator, and the share recovers the mean reward difference `beta(a, 1)`;
//! the share regressor absorbs the context imbalance between the two arms.
//! The value of a counterfactual policy is then the plug-in
//!
//! ```text
//! V_hat(pi) = mean(Y) + sum_a beta_hat_a * mean(pi(a|X) - ML(a|X))
//! ```
//!
//! which reduces exactly to the sample mean of rewards when `pi` equals the
//! logging policy.
//!
//! Baselines: raw mean differences (full sample or the full-support segment)
//! and a regression direct method, both for benchmarking against the share-
//! controlled fit.

use crate::aps::ApsTable;
use crate::data::LogDataset;
use crate::linalg::{least_squares, LeastSquaresFit, LinalgError};
use crate::numeric::CompensatedSum;
use crate::policy::{PolicyError, PolicySpec};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Tolerance for collinearity detection: smallest singular value of the
/// design below this multiple of the largest triggers the reduced fit.
const COLLINEARITY_RCOND: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("subsample for action {action} vs {baseline} has {size} records, need at least 3")]
    SubsampleTooSmall {
        action: usize,
        baseline: usize,
        size: usize,
    },
    #[error("design for action {action} vs {baseline} is singular even without an intercept")]
    FullCollinearity { action: usize, baseline: usize },
    #[error("no pairwise fit supplied for action {action}")]
    MissingFit { action: usize },
    #[error("action {action} cell is empty under the requested restriction")]
    EmptyCell { action: usize },
    #[error("direct-method design is rank deficient")]
    RankDeficient,
    #[error("effect-ratio denominator {value} is within {epsilon} of zero")]
    DenominatorNearZero { value: f64, epsilon: f64 },
    #[error("beta({action},1) is unidentified: {attempts:?}")]
    Unidentified {
        action: usize,
        attempts: Vec<String>,
    },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Least-squares fit of reward on (intercept, action indicator, share) over
/// one pairwise subsample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairwiseFit {
    pub action: usize,
    pub baseline: usize,
    pub alpha_hat: f64,
    pub beta_hat: f64,
    pub gamma_hat: f64,
    pub n_sub: usize,
    /// Heteroskedasticity-robust (HC0) standard error of `beta_hat`.
    pub se_beta_robust: f64,
    /// Set when the share was constant on the subsample and the fit was
    /// re-run without an intercept.
    pub collinearity_flag: bool,
}

/// Indices with `A_i` in `{1, a}` and share strictly inside (0, 1).
pub fn select_subsample(dataset: &LogDataset, aps: &ApsTable, a: usize) -> Vec<usize> {
    subsample_between(dataset, aps, a, 1)
}

fn subsample_between(dataset: &LogDataset, aps: &ApsTable, a: usize, b: usize) -> Vec<usize> {
    (0..dataset.n())
        .filter(|&i| {
            let act = dataset.actions[i];
            if act != a && act != b {
                return false;
            }
            matches!(aps.q_between(i, a, b), Some(q) if q > 0.0 && q < 1.0)
        })
        .collect()
}

/// Pairwise fit of action `a` against the baseline action 1.
pub fn fit_pairwise(
    dataset: &LogDataset,
    aps: &ApsTable,
    a: usize,
) -> Result<PairwiseFit, EstimatorError> {
    fit_pairwise_between(dataset, aps, a, 1)
}

/// Pairwise fit of action `a` against an arbitrary reference action `b`,
/// using the share `p_a / (p_a + p_b)` as the control.
pub fn fit_pairwise_between(
    dataset: &LogDataset,
    aps: &ApsTable,
    a: usize,
    b: usize,
) -> Result<PairwiseFit, EstimatorError> {
    let idx = subsample_between(dataset, aps, a, b);
    let n_sub = idx.len();
    if n_sub < 3 {
        return Err(EstimatorError::SubsampleTooSmall {
            action: a,
            baseline: b,
            size: n_sub,
        });
    }

    let mut design = Array2::<f64>::zeros((n_sub, 3));
    let mut response = Array1::<f64>::zeros(n_sub);
    for (r, &i) in idx.iter().enumerate() {
        design[(r, 0)] = 1.0;
        design[(r, 1)] = if dataset.actions[i] == a { 1.0 } else { 0.0 };
        design[(r, 2)] = aps.q_between(i, a, b).expect("subsample share defined");
        response[r] = dataset.rewards[i];
    }

    let full = least_squares(design.view(), response.view(), COLLINEARITY_RCOND)?;
    if full.rank == 3 {
        let cov = full.hc0_covariance(design.view());
        return Ok(PairwiseFit {
            action: a,
            baseline: b,
            alpha_hat: full.coefficients[0],
            beta_hat: full.coefficients[1],
            gamma_hat: full.coefficients[2],
            n_sub,
            se_beta_robust: cov[(1, 1)].max(0.0).sqrt(),
            collinearity_flag: false,
        });
    }

    // Constant share makes (intercept, share) collinear; dropping the
    // intercept restores identification of the action contrast.
    let reduced_design = {
        let mut d = Array2::<f64>::zeros((n_sub, 2));
        for r in 0..n_sub {
            d[(r, 0)] = design[(r, 1)];
            d[(r, 1)] = design[(r, 2)];
        }
        d
    };
    let reduced = least_squares(reduced_design.view(), response.view(), COLLINEARITY_RCOND)?;
    if reduced.rank < 2 {
        return Err(EstimatorError::FullCollinearity {
            action: a,
            baseline: b,
        });
    }
    let cov = reduced.hc0_covariance(reduced_design.view());
    Ok(PairwiseFit {
        action: a,
        baseline: b,
        alpha_hat: 0.0,
        beta_hat: reduced.coefficients[0],
        gamma_hat: reduced.coefficients[1],
        n_sub,
        se_beta_robust: cov[(0, 0)].max(0.0).sqrt(),
        collinearity_flag: true,
    })
}

/// One resolved `beta(a, 1)`, either from a direct pairwise fit or composed
/// along a path of overlapping pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairReport {
    pub action: usize,
    pub beta_hat: f64,
    pub se_beta_robust: f64,
    pub n_sub: usize,
    pub collinearity_flag: bool,
    /// Action sequence `1, ..., a` when the direct pair failed and the
    /// estimate chains intermediate contrasts; `None` for a direct fit.
    pub chained_path: Option<Vec<usize>>,
}

/// Value of the counterfactual policy with per-pair diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub v_hat: f64,
    pub mean_logged_reward: f64,
    /// `mean(pi(a|X) - ML(a|X))` for `a = 2..=m`.
    pub shift_terms: Vec<f64>,
    pub per_pair: Vec<PairReport>,
}

/// Per-action mean of `pi(a|X_i) - ML(a|X_i)` for `a = 2..=m`, evaluated in
/// raw context coordinates.
pub fn compute_shift_terms(
    dataset: &LogDataset,
    policy_ml: &PolicySpec,
    policy_pi: &PolicySpec,
) -> Result<Vec<f64>, EstimatorError> {
    let m = dataset.m;
    let n = dataset.n();
    let mut x = vec![0.0; dataset.contexts.input_dim()];
    let mut ml = vec![0.0; m];
    let mut pi = vec![0.0; m];
    let mut acc = vec![CompensatedSum::new(); m - 1];
    for i in 0..n {
        dataset.contexts.policy_row_into(i, &mut x);
        policy_ml.evaluate_into(&x, &mut ml)?;
        policy_pi.evaluate_into(&x, &mut pi)?;
        for a in 2..=m {
            acc[a - 2].add(pi[a - 1] - ml[a - 1]);
        }
    }
    Ok(acc.iter().map(|s| s.total() / n as f64).collect())
}

/// Plug-in value estimate from direct pairwise fits (one per `a = 2..=m`,
/// all against baseline 1).
pub fn estimate_value(
    dataset: &LogDataset,
    policy_ml: &PolicySpec,
    policy_pi: &PolicySpec,
    fits: &[PairwiseFit],
) -> Result<ValueEstimate, EstimatorError> {
    let reports: Vec<PairReport> = (2..=dataset.m)
        .map(|a| {
            fits.iter()
                .find(|f| f.action == a && f.baseline == 1)
                .map(|f| PairReport {
                    action: a,
                    beta_hat: f.beta_hat,
                    se_beta_robust: f.se_beta_robust,
                    n_sub: f.n_sub,
                    collinearity_flag: f.collinearity_flag,
                    chained_path: None,
                })
                .ok_or(EstimatorError::MissingFit { action: a })
        })
        .collect::<Result<_, _>>()?;
    estimate_value_from_reports(dataset, policy_ml, policy_pi, reports)
}

fn estimate_value_from_reports(
    dataset: &LogDataset,
    policy_ml: &PolicySpec,
    policy_pi: &PolicySpec,
    per_pair: Vec<PairReport>,
) -> Result<ValueEstimate, EstimatorError> {
    let shift_terms = compute_shift_terms(dataset, policy_ml, policy_pi)?;
    let mean_logged_reward = dataset.mean_reward();
    let mut v_hat = mean_logged_reward;
    for (report, shift) in per_pair.iter().zip(&shift_terms) {
        v_hat += report.beta_hat * shift;
    }
    Ok(ValueEstimate {
        v_hat,
        mean_logged_reward,
        shift_terms,
        per_pair,
    })
}

/// Plug-in value from externally supplied contrasts (used by the mean-
/// difference baselines, which reuse the same plug-in formula).
pub fn estimate_value_from_betas(
    dataset: &LogDataset,
    policy_ml: &PolicySpec,
    policy_pi: &PolicySpec,
    betas: &[f64],
) -> Result<ValueEstimate, EstimatorError> {
    assert_eq!(betas.len(), dataset.m - 1, "one beta per non-baseline action");
    let per_pair = betas
        .iter()
        .enumerate()
        .map(|(k, &beta_hat)| PairReport {
            action: k + 2,
            beta_hat,
            se_beta_robust: f64::NAN,
            n_sub: 0,
            collinearity_flag: false,
            chained_path: None,
        })
        .collect();
    estimate_value_from_reports(dataset, policy_ml, policy_pi, per_pair)
}

/// Resolution of every `beta(a, 1)` with a log of what was attempted.
#[derive(Debug, Clone)]
pub struct BetaResolution {
    pub per_pair: Vec<PairReport>,
    pub log: Vec<String>,
}

/// Resolves `beta(a, 1)` for every non-baseline action: direct pairwise fit
/// first, then (optionally) the shortest path of positive-overlap pairs,
/// composing contrasts along the path. Ties between equal-length paths break
/// toward the smallest intermediate action indices.
pub fn resolve_betas(
    dataset: &LogDataset,
    aps: &ApsTable,
    allow_chaining: bool,
) -> Result<BetaResolution, EstimatorError> {
    let m = dataset.m;
    let mut cache: BTreeMap<(usize, usize), Result<PairwiseFit, String>> = BTreeMap::new();
    let mut log = Vec::new();
    let mut per_pair = Vec::with_capacity(m - 1);

    let fit_cached = |a: usize, b: usize,
                          cache: &mut BTreeMap<(usize, usize), Result<PairwiseFit, String>>|
     -> Result<PairwiseFit, String> {
        cache
            .entry((a, b))
            .or_insert_with(|| fit_pairwise_between(dataset, aps, a, b).map_err(|e| e.to_string()))
            .clone()
    };

    for a in 2..=m {
        match fit_cached(a, 1, &mut cache) {
            Ok(fit) => {
                log.push(format!("pair {a} vs 1: direct fit, n = {}", fit.n_sub));
                per_pair.push(PairReport {
                    action: a,
                    beta_hat: fit.beta_hat,
                    se_beta_robust: fit.se_beta_robust,
                    n_sub: fit.n_sub,
                    collinearity_flag: fit.collinearity_flag,
                    chained_path: None,
                });
                continue;
            }
            Err(reason) => {
                let mut attempts = vec![format!("direct 1->{a}: {reason}")];
                if !allow_chaining {
                    return Err(EstimatorError::Unidentified { action: a, attempts });
                }
                let mut found = None;
                'paths: for path in candidate_paths(m, a) {
                    let mut beta = 0.0;
                    let mut var = 0.0;
                    let mut n_min = usize::MAX;
                    let mut collinear = false;
                    let mut edge_fits = Vec::new();
                    for w in path.windows(2) {
                        match fit_cached(w[1], w[0], &mut cache) {
                            Ok(fit) => {
                                beta += fit.beta_hat;
                                var += fit.se_beta_robust * fit.se_beta_robust;
                                n_min = n_min.min(fit.n_sub);
                                collinear |= fit.collinearity_flag;
                                edge_fits.push((w[0], w[1]));
                            }
                            Err(reason) => {
                                attempts.push(format!(
                                    "path {path:?} edge {}->{}: {reason}",
                                    w[0], w[1]
                                ));
                                continue 'paths;
                            }
                        }
                    }
                    found = Some((path.clone(), beta, var.sqrt(), n_min, collinear));
                    log.push(format!(
                        "pair {a} vs 1: chained via {path:?} (edges {edge_fits:?})"
                    ));
                    break;
                }
                match found {
                    Some((path, beta, se, n_min, collinear)) => per_pair.push(PairReport {
                        action: a,
                        beta_hat: beta,
                        se_beta_robust: se,
                        n_sub: n_min,
                        collinearity_flag: collinear,
                        chained_path: Some(path),
                    }),
                    None => {
                        return Err(EstimatorError::Unidentified { action: a, attempts });
                    }
                }
            }
        }
    }

    Ok(BetaResolution { per_pair, log })
}

/// Simple paths `1 -> a` ordered by length then lexicographic intermediates.
fn candidate_paths(m: usize, a: usize) -> Vec<Vec<usize>> {
    let intermediates: Vec<usize> = (2..=m).filter(|&v| v != a).collect();
    let mut paths = Vec::new();
    for len in 1..=intermediates.len() {
        let mut chosen = Vec::with_capacity(len);
        ordered_subsequences(&intermediates, len, &mut chosen, &mut |seq| {
            let mut path = Vec::with_capacity(len + 2);
            path.push(1);
            path.extend_from_slice(seq);
            path.push(a);
            paths.push(path);
        });
    }
    paths
}

fn ordered_subsequences(
    pool: &[usize],
    len: usize,
    chosen: &mut Vec<usize>,
    emit: &mut impl FnMut(&[usize]),
) {
    if chosen.len() == len {
        emit(chosen);
        return;
    }
    for (i, &v) in pool.iter().enumerate() {
        if chosen.contains(&v) {
            continue;
        }
        chosen.push(v);
        let _ = i;
        ordered_subsequences(pool, len, chosen, emit);
        chosen.pop();
    }
}

/// Composite: resolve all contrasts from the propensity table and plug in.
pub fn evaluate_policy_value(
    dataset: &LogDataset,
    aps: &ApsTable,
    policy_ml: &PolicySpec,
    policy_pi: &PolicySpec,
    allow_chaining: bool,
) -> Result<(ValueEstimate, Vec<String>), EstimatorError> {
    let resolution = resolve_betas(dataset, aps, allow_chaining)?;
    let estimate =
        estimate_value_from_reports(dataset, policy_ml, policy_pi, resolution.per_pair)?;
    Ok((estimate, resolution.log))
}

/// Which records the mean-difference baseline may use.
#[derive(Debug, Clone, Copy)]
pub enum SampleRestriction<'a> {
    /// Every record.
    All,
    /// Records where the logging policy gives every action positive
    /// probability (the fully randomized segment).
    FullSupportRegion(&'a PolicySpec),
}

/// Mean difference in rewards between action `a` and the baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeanDifference {
    pub action: usize,
    pub beta_hat: f64,
    pub n_treated: usize,
    pub n_baseline: usize,
    /// Records satisfying the restriction (before the action filter).
    pub n_region: usize,
}

/// `mean(Y | A = a) - mean(Y | A = 1)` over the chosen restriction.
pub fn baseline_mean_difference(
    dataset: &LogDataset,
    a: usize,
    restriction: SampleRestriction<'_>,
) -> Result<MeanDifference, EstimatorError> {
    let keep: Vec<bool> = match restriction {
        SampleRestriction::All => vec![true; dataset.n()],
        SampleRestriction::FullSupportRegion(ml) => {
            let mut x = vec![0.0; dataset.contexts.input_dim()];
            let mut probs = vec![0.0; dataset.m];
            let mut keep = Vec::with_capacity(dataset.n());
            for i in 0..dataset.n() {
                dataset.contexts.policy_row_into(i, &mut x);
                ml.evaluate_into(&x, &mut probs)?;
                keep.push(probs.iter().all(|&p| p > 0.0));
            }
            keep
        }
    };
    let n_region = keep.iter().filter(|&&k| k).count();

    let mut sum_a = CompensatedSum::new();
    let mut sum_1 = CompensatedSum::new();
    let mut n_a = 0usize;
    let mut n_1 = 0usize;
    for i in 0..dataset.n() {
        if !keep[i] {
            continue;
        }
        if dataset.actions[i] == a {
            sum_a.add(dataset.rewards[i]);
            n_a += 1;
        } else if dataset.actions[i] == 1 {
            sum_1.add(dataset.rewards[i]);
            n_1 += 1;
        }
    }
    if n_a == 0 || n_1 == 0 {
        return Err(EstimatorError::EmptyCell { action: a });
    }
    Ok(MeanDifference {
        action: a,
        beta_hat: sum_a.total() / n_a as f64 - sum_1.total() / n_1 as f64,
        n_treated: n_a,
        n_baseline: n_1,
        n_region,
    })
}

/// Direct-method value estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirectMethodEstimate {
    pub v_hat: f64,
    /// Fitted contrasts relative to action 1, for `a = 2..=m`.
    pub beta_hats: Vec<f64>,
}

/// Regression baseline: fit `Y ~ 1 + action dummies + features`, predict each
/// record's reward under every action as `Y_i + (beta_a - beta_{A_i})`, and
/// average the predictions under the target policy.
pub fn baseline_direct_method(
    dataset: &LogDataset,
    policy_pi: &PolicySpec,
) -> Result<DirectMethodEstimate, EstimatorError> {
    let n = dataset.n();
    let m = dataset.m;
    let values = dataset.contexts.continuous();
    let pc = dataset.contexts.continuous_dim();
    let pd = dataset.contexts.discrete_dim();
    let k = 1 + (m - 1) + pc + pd;

    let mut design = Array2::<f64>::zeros((n, k));
    let mut response = Array1::<f64>::zeros(n);
    for i in 0..n {
        design[(i, 0)] = 1.0;
        let a = dataset.actions[i];
        if a >= 2 {
            design[(i, a - 1)] = 1.0;
        }
        for j in 0..pc {
            design[(i, m + j - 1 + 1)] = values[(i, j)];
        }
        for j in 0..pd {
            design[(i, m + pc + j)] = dataset.contexts.discrete()[(i, j)] as f64;
        }
        response[i] = dataset.rewards[i];
    }

    let fit: LeastSquaresFit = least_squares(design.view(), response.view(), COLLINEARITY_RCOND)?;
    if fit.rank < k {
        return Err(EstimatorError::RankDeficient);
    }
    let beta_hats: Vec<f64> = (0..m - 1).map(|j| fit.coefficients[1 + j]).collect();
    let beta_of = |a: usize| -> f64 {
        if a == 1 {
            0.0
        } else {
            beta_hats[a - 2]
        }
    };

    let mut x = vec![0.0; dataset.contexts.input_dim()];
    let mut pi = vec![0.0; m];
    let mut acc = CompensatedSum::new();
    for i in 0..n {
        dataset.contexts.policy_row_into(i, &mut x);
        policy_pi.evaluate_into(&x, &mut pi)?;
        let logged = beta_of(dataset.actions[i]);
        for a in 1..=m {
            let mu = dataset.rewards[i] + beta_of(a) - logged;
            acc.add(mu * pi[a - 1]);
        }
    }

    Ok(DirectMethodEstimate {
        v_hat: acc.total() / n as f64,
        beta_hats,
    })
}

/// Ratio of two fitted contrasts (a cost-effectiveness style measure across
/// two outcomes estimated on the same records).
pub fn effect_ratio(
    fit_num: &PairwiseFit,
    fit_den: &PairwiseFit,
    epsilon: f64,
) -> Result<f64, EstimatorError> {
    effect_ratio_values(fit_num.beta_hat, fit_den.beta_hat, epsilon)
}

/// Same guard on bare contrast values.
pub fn effect_ratio_values(
    beta_num: f64,
    beta_den: f64,
    epsilon: f64,
) -> Result<f64, EstimatorError> {
    if beta_den.abs() <= epsilon {
        return Err(EstimatorError::DenominatorNearZero {
            value: beta_den,
            epsilon,
        });
    }
    Ok(beta_num / beta_den)
}
