//! Declarative policy specifications.
//!
//! A [`PolicySpec`] describes a mapping from a context vector to a
//! distribution over actions `1..=m`. Evaluation is a pure function of
//! `(spec, x)` — cheap, reentrant, and therefore simulatable: the propensity
//! machinery calls it at millions of perturbed points from many threads.
//! Specs serialize to a tagged JSON document so production policies can be
//! supplied declaratively.
//!
//! Deterministic variants return one-hot vectors; argmax ties break toward
//! the lowest action index.

use crate::data::LogDataset;
use crate::linalg::{least_squares, LinalgError};
use crate::numeric::quantile_sorted;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const UCB_BINS: usize = 10;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("context has dimension {got}, policy expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid policy specification: {0}")]
    InvalidSpec(String),
    #[error("action {action} has {count} observations, need at least {required}")]
    InsufficientActionData {
        action: usize,
        count: usize,
        required: usize,
    },
    #[error("feature {feature} has only {distinct} distinct values; deciles need at least 10")]
    DegenerateDeciles { feature: usize, distinct: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Comparison applied by table-lookup region conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmpOp {
    /// `x[feature] >= threshold`
    Ge,
    /// `x[feature] < threshold`
    Lt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub feature: usize,
    pub op: CmpOp,
    pub threshold: f64,
}

impl Condition {
    fn holds(&self, x: &[f64]) -> bool {
        match self.op {
            CmpOp::Ge => x[self.feature] >= self.threshold,
            CmpOp::Lt => x[self.feature] < self.threshold,
        }
    }
}

/// One region row of a table-lookup policy: all conditions must hold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub conditions: Vec<Condition>,
    pub probs: Vec<f64>,
}

/// Scalar score function used by threshold policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Scorer {
    Linear {
        intercept: f64,
        coefficients: Vec<f64>,
    },
}

impl Scorer {
    fn score(&self, x: &[f64]) -> Result<f64, PolicyError> {
        match self {
            Scorer::Linear {
                intercept,
                coefficients,
            } => {
                if coefficients.len() != x.len() {
                    return Err(PolicyError::DimensionMismatch {
                        expected: coefficients.len(),
                        got: x.len(),
                    });
                }
                let mut s = *intercept;
                for (c, v) in coefficients.iter().zip(x) {
                    s += c * v;
                }
                Ok(s)
            }
        }
    }
}

/// Declarative policy over actions `1..=m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PolicySpec {
    /// Equal probability on every action.
    Uniform { m: usize },
    /// First matching region row wins; `fallback` applies when none match.
    TableLookup {
        m: usize,
        rows: Vec<TableRow>,
        fallback: Vec<f64>,
    },
    /// Deterministic argmax of `intercepts[a] + coefficients[a] . x`.
    LinearGreedy {
        intercepts: Vec<f64>,
        coefficients: Vec<Vec<f64>>,
    },
    /// `inside` applies when `x[gate_feature] >= gate_threshold`, else `outside`.
    QuantileGate {
        gate_feature: usize,
        gate_threshold: f64,
        inside: Box<PolicySpec>,
        outside: Box<PolicySpec>,
    },
    /// Deterministic argmax of `Q(a, d1, d2) + c sqrt(ln n / N(a, d1, d2))`
    /// over decile cells of two features; an untried cell (`N = 0`) gets an
    /// infinite bonus. Decile bins are right-closed; out-of-range values
    /// clamp to the extreme bins.
    UcbTable {
        m: usize,
        feature_pair: (usize, usize),
        /// Nine interior decile cut points per feature.
        cuts1: Vec<f64>,
        cuts2: Vec<f64>,
        /// Cell mean rewards, indexed `(a-1) * 100 + (d1-1) * 10 + (d2-1)`.
        q: Vec<f64>,
        /// Cell observation counts, same indexing.
        counts: Vec<u64>,
        exploration: f64,
        train_n: usize,
    },
    /// Binary policy: action 2 when `scorer(x) >= threshold`, else action 1.
    ScoreThreshold { scorer: Scorer, threshold: f64 },
}

impl PolicySpec {
    pub fn action_count(&self) -> usize {
        match self {
            PolicySpec::Uniform { m } => *m,
            PolicySpec::TableLookup { m, .. } => *m,
            PolicySpec::LinearGreedy { intercepts, .. } => intercepts.len(),
            PolicySpec::QuantileGate { inside, .. } => inside.action_count(),
            PolicySpec::UcbTable { m, .. } => *m,
            PolicySpec::ScoreThreshold { .. } => 2,
        }
    }

    /// Probability vector over `1..=m` at context `x`.
    pub fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>, PolicyError> {
        let mut out = vec![0.0; self.action_count()];
        self.evaluate_into(x, &mut out)?;
        Ok(out)
    }

    /// Allocation-free evaluation; `out` must have length `action_count()`.
    pub fn evaluate_into(&self, x: &[f64], out: &mut [f64]) -> Result<(), PolicyError> {
        debug_assert_eq!(out.len(), self.action_count());
        match self {
            PolicySpec::Uniform { m } => {
                out.fill(1.0 / *m as f64);
            }
            PolicySpec::TableLookup { m, rows, fallback } => {
                for row in rows {
                    self.check_indices(row.conditions.iter().map(|c| c.feature), x.len())?;
                    if row.conditions.iter().all(|c| c.holds(x)) {
                        if row.probs.len() != *m {
                            return Err(PolicyError::InvalidSpec(format!(
                                "table row has {} probabilities, expected {m}",
                                row.probs.len()
                            )));
                        }
                        out.copy_from_slice(&row.probs);
                        return Ok(());
                    }
                }
                if fallback.len() != *m {
                    return Err(PolicyError::InvalidSpec(format!(
                        "fallback has {} probabilities, expected {m}",
                        fallback.len()
                    )));
                }
                out.copy_from_slice(fallback);
            }
            PolicySpec::LinearGreedy {
                intercepts,
                coefficients,
            } => {
                let mut best = 0usize;
                let mut best_score = f64::NEG_INFINITY;
                for (a, (b, c)) in intercepts.iter().zip(coefficients).enumerate() {
                    if c.len() != x.len() {
                        return Err(PolicyError::DimensionMismatch {
                            expected: c.len(),
                            got: x.len(),
                        });
                    }
                    let mut s = *b;
                    for (cj, xj) in c.iter().zip(x) {
                        s += cj * xj;
                    }
                    if s > best_score {
                        best_score = s;
                        best = a;
                    }
                }
                out.fill(0.0);
                out[best] = 1.0;
            }
            PolicySpec::QuantileGate {
                gate_feature,
                gate_threshold,
                inside,
                outside,
            } => {
                self.check_indices(std::iter::once(*gate_feature), x.len())?;
                if x[*gate_feature] >= *gate_threshold {
                    inside.evaluate_into(x, out)?;
                } else {
                    outside.evaluate_into(x, out)?;
                }
            }
            PolicySpec::UcbTable {
                m,
                feature_pair,
                cuts1,
                cuts2,
                q,
                counts,
                exploration,
                train_n,
            } => {
                self.check_indices([feature_pair.0, feature_pair.1].into_iter(), x.len())?;
                let d1 = decile_index(cuts1, x[feature_pair.0]);
                let d2 = decile_index(cuts2, x[feature_pair.1]);
                let log_n = (*train_n as f64).ln();
                let mut best = 0usize;
                let mut best_score = f64::NEG_INFINITY;
                for a in 0..*m {
                    let cell = a * UCB_BINS * UCB_BINS + (d1 - 1) * UCB_BINS + (d2 - 1);
                    let bonus = if counts[cell] == 0 {
                        f64::INFINITY
                    } else {
                        exploration * (log_n / counts[cell] as f64).sqrt()
                    };
                    let score = q[cell] + bonus;
                    if score > best_score {
                        best_score = score;
                        best = a;
                    }
                }
                out.fill(0.0);
                out[best] = 1.0;
            }
            PolicySpec::ScoreThreshold { scorer, threshold } => {
                let s = scorer.score(x)?;
                out.fill(0.0);
                if s >= *threshold {
                    out[1] = 1.0;
                } else {
                    out[0] = 1.0;
                }
            }
        }
        Ok(())
    }

    fn check_indices(
        &self,
        indices: impl Iterator<Item = usize>,
        dim: usize,
    ) -> Result<(), PolicyError> {
        for idx in indices {
            if idx >= dim {
                return Err(PolicyError::DimensionMismatch {
                    expected: idx + 1,
                    got: dim,
                });
            }
        }
        Ok(())
    }
}

/// Right-closed decile bin in `1..=10`; values beyond the cut range clamp.
fn decile_index(cuts: &[f64], x: f64) -> usize {
    let below = cuts.iter().filter(|&&c| c < x).count();
    below.min(UCB_BINS - 1) + 1
}

/// Per-action linear reward model `score(x, a) = b_a + c_a . x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionModel {
    pub intercepts: Vec<f64>,
    pub coefficients: Vec<Vec<f64>>,
    /// True when any per-action design was singular beyond tolerance and a
    /// minimum-norm (pseudo-inverse) solution was used instead.
    pub rank_deficient: bool,
}

impl PredictionModel {
    pub fn score(&self, x: &[f64], action: usize) -> f64 {
        let c = &self.coefficients[action - 1];
        let mut s = self.intercepts[action - 1];
        for (cj, xj) in c.iter().zip(x) {
            s += cj * xj;
        }
        s
    }

    /// The deterministic policy that picks the highest-scoring action.
    pub fn to_greedy_policy(&self) -> PolicySpec {
        PolicySpec::LinearGreedy {
            intercepts: self.intercepts.clone(),
            coefficients: self.coefficients.clone(),
        }
    }
}

/// Fits `Y ~ (b_a + c_a . x) 1{A = a}` by least squares.
///
/// The interaction regression decomposes into one ordinary regression per
/// action subsample because regressors for different actions never co-occur.
/// Continuous features only; every action needs at least `p_c + 1`
/// observations. A singular subsample design falls back to the minimum-norm
/// solution and flags the model.
pub fn fit_linear_reward_model(train: &LogDataset) -> Result<PredictionModel, PolicyError> {
    let pc = train.contexts.continuous_dim();
    let required = pc + 1;
    let values = train.contexts.continuous();

    let mut intercepts = Vec::with_capacity(train.m);
    let mut coefficients = Vec::with_capacity(train.m);
    let mut rank_deficient = false;

    for a in 1..=train.m {
        let rows: Vec<usize> = (0..train.n()).filter(|&i| train.actions[i] == a).collect();
        if rows.len() < required {
            return Err(PolicyError::InsufficientActionData {
                action: a,
                count: rows.len(),
                required,
            });
        }
        let mut design = Array2::<f64>::zeros((rows.len(), pc + 1));
        let mut response = Array1::<f64>::zeros(rows.len());
        for (r, &i) in rows.iter().enumerate() {
            design[(r, 0)] = 1.0;
            for j in 0..pc {
                design[(r, j + 1)] = values[(i, j)];
            }
            response[r] = train.rewards[i];
        }
        let fit = least_squares(design.view(), response.view(), 1e-10)?;
        if fit.rank < pc + 1 {
            rank_deficient = true;
        }
        intercepts.push(fit.coefficients[0]);
        coefficients.push(fit.coefficients.iter().skip(1).copied().collect());
    }

    Ok(PredictionModel {
        intercepts,
        coefficients,
        rank_deficient,
    })
}

/// Trains a decile-bucketed UCB policy on two features of the training log.
///
/// Cut points are the 10%..90% quantiles of each feature in `train`; cell
/// values are per-action mean rewards and counts. The resulting policy is the
/// deterministic argmax of the upper confidence bound.
pub fn train_ucb(
    train: &LogDataset,
    exploration: f64,
    feature_pair: (usize, usize),
) -> Result<PolicySpec, PolicyError> {
    let values = train.contexts.continuous();
    let n = train.n();
    let m = train.m;

    let mut cut_sets = Vec::with_capacity(2);
    for &feature in &[feature_pair.0, feature_pair.1] {
        if feature >= train.contexts.input_dim() {
            return Err(PolicyError::DimensionMismatch {
                expected: feature + 1,
                got: train.contexts.input_dim(),
            });
        }
        let mut col: Vec<f64> = (0..n).map(|i| values[(i, feature)]).collect();
        col.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut distinct = 1;
        for w in col.windows(2) {
            if w[1] > w[0] {
                distinct += 1;
            }
        }
        if distinct < UCB_BINS {
            return Err(PolicyError::DegenerateDeciles { feature, distinct });
        }
        let cuts: Vec<f64> = (1..UCB_BINS)
            .map(|k| quantile_sorted(&col, k as f64 / UCB_BINS as f64))
            .collect();
        cut_sets.push(cuts);
    }
    let cuts2 = cut_sets.pop().unwrap();
    let cuts1 = cut_sets.pop().unwrap();

    let cells = m * UCB_BINS * UCB_BINS;
    let mut sums = vec![0.0; cells];
    let mut counts = vec![0u64; cells];
    for i in 0..n {
        let d1 = decile_index(&cuts1, values[(i, feature_pair.0)]);
        let d2 = decile_index(&cuts2, values[(i, feature_pair.1)]);
        let cell = (train.actions[i] - 1) * UCB_BINS * UCB_BINS + (d1 - 1) * UCB_BINS + (d2 - 1);
        sums[cell] += train.rewards[i];
        counts[cell] += 1;
    }
    let q: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();

    Ok(PolicySpec::UcbTable {
        m,
        feature_pair,
        cuts1,
        cuts2,
        q,
        counts,
        exploration,
        train_n: n,
    })
}
