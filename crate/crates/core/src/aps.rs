//! Simulated approximate propensity scores.
//!
//! The approximate propensity score of action `a` at context `x` is the
//! average probability the logging policy assigns to `a` over the `delta`-ball
//! around `x` (in normalized context space, so one bandwidth is comparable
//! across dimensions). It is estimated by brute force: draw `S` points
//! uniformly in the ball, evaluate the policy at each, and average. The Monte
//! Carlo error decays as `1/sqrt(S)` independent of the context dimension.
//!
//! For a record holding discrete context columns, the ball perturbs only the
//! continuous block; discrete values stay fixed.
//!
//! [`k_profile`] is the closed-form limit of the score for a deterministic
//! halfspace policy as the bandwidth shrinks: at signed normalized offset `v`
//! from the boundary, the score tends to the fraction of a unit ball on the
//! chosen side of a hyperplane at distance `|v|` — a hyperspherical-cap
//! volume expressed through the regularized incomplete beta function. It
//! serves as an independent oracle for the sampler.

use crate::data::LogDataset;
use crate::numeric::CompensatedSum;
use crate::policy::{PolicyError, PolicySpec};
use crate::rng::RngPlan;
use crate::special::{regularized_incomplete_beta, SpecialError};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ApsError {
    #[error("bandwidth must be positive, got {0}")]
    NonPositiveBandwidth(f64),
    #[error("need at least one simulation draw")]
    ZeroDraws,
    #[error("ball sampling needs at least one continuous dimension")]
    NoContinuousDimensions,
    #[error("contexts must be normalized before computing propensity scores")]
    ContextsNotNormalized,
    #[error("offset must lie in (-1, 1), got {0}")]
    OffsetOutOfRange(f64),
    #[error("profile dimension must be at least 1")]
    ZeroDimension,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Special(#[from] SpecialError),
}

/// Uniform sampler on the open ball `B(center, delta)`.
///
/// A draw is an isotropic Gaussian direction scaled to radius
/// `delta * U^(1/p)`, which is exactly uniform in any dimension and never
/// rejects.
#[derive(Debug, Clone, Copy)]
pub struct BallSampler {
    dim: usize,
    delta: f64,
}

impl BallSampler {
    pub fn new(dim: usize, delta: f64) -> Result<Self, ApsError> {
        if !(delta > 0.0) {
            return Err(ApsError::NonPositiveBandwidth(delta));
        }
        if dim == 0 {
            return Err(ApsError::NoContinuousDimensions);
        }
        Ok(Self { dim, delta })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Writes `center + r * u` into `out`, with `u` uniform on the sphere and
    /// `r = delta * U^(1/p)`.
    pub fn sample_into(&self, center: &[f64], rng: &mut ChaCha8Rng, out: &mut [f64]) {
        debug_assert_eq!(center.len(), self.dim);
        debug_assert_eq!(out.len(), self.dim);
        loop {
            let mut norm2 = 0.0;
            for o in out.iter_mut() {
                let g: f64 = rng.sample(StandardNormal);
                *o = g;
                norm2 += g * g;
            }
            if norm2 > 0.0 {
                let u: f64 = rng.gen(); // [0, 1) keeps the radius strictly inside
                let radius = self.delta * u.powf(1.0 / self.dim as f64);
                let scale = radius / norm2.sqrt();
                for (o, c) in out.iter_mut().zip(center) {
                    *o = c + *o * scale;
                }
                return;
            }
            // A zero Gaussian vector has probability zero; redraw if it happens.
        }
    }
}

/// One uniform draw from `B(center, delta)`.
pub fn sample_uniform_ball(
    center: &[f64],
    delta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, ApsError> {
    let sampler = BallSampler::new(center.len(), delta)?;
    let mut out = vec![0.0; center.len()];
    sampler.sample_into(center, rng, &mut out);
    Ok(out)
}

/// Per-record, per-action simulated propensity scores and pairwise shares.
#[derive(Debug, Clone)]
pub struct ApsTable {
    p_hat: Array2<f64>,
    /// `q_hat[(i, a-2)]` = p_a / (p_a + p_1); NaN marks 0/0 (undefined).
    q_hat: Array2<f64>,
    delta: f64,
    draws: usize,
    master_seed: u64,
}

impl ApsTable {
    pub fn n(&self) -> usize {
        self.p_hat.nrows()
    }

    pub fn action_count(&self) -> usize {
        self.p_hat.ncols()
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn draws(&self) -> usize {
        self.draws
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    /// Simulated score of action `a` (1-based) at record `i`.
    pub fn p(&self, i: usize, a: usize) -> f64 {
        self.p_hat[(i, a - 1)]
    }

    /// Pairwise share of action `a` versus the baseline; `None` when both
    /// scores were zero so the share is undefined.
    pub fn q(&self, i: usize, a: usize) -> Option<f64> {
        let v = self.q_hat[(i, a - 2)];
        if v.is_nan() {
            None
        } else {
            Some(v)
        }
    }

    /// Share of action `a` versus an arbitrary reference action `b`.
    pub fn q_between(&self, i: usize, a: usize, b: usize) -> Option<f64> {
        let pa = self.p(i, a);
        let pb = self.p(i, b);
        let denom = pa + pb;
        if denom > 0.0 {
            Some(pa / denom)
        } else {
            None
        }
    }

    /// Audit export: `record, p_hat_1..m, q_hat_2..m` with `NA` for
    /// undefined shares.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let m = self.action_count();
        let mut header = String::from("record");
        for a in 1..=m {
            header.push_str(&format!(",p_hat_{a}"));
        }
        for a in 2..=m {
            header.push_str(&format!(",q_hat_{a}"));
        }
        writeln!(w, "{header}")?;
        for i in 0..self.n() {
            let mut line = i.to_string();
            for a in 1..=m {
                line.push_str(&format!(",{}", self.p(i, a)));
            }
            for a in 2..=m {
                match self.q(i, a) {
                    Some(q) => line.push_str(&format!(",{q}")),
                    None => line.push_str(",NA"),
                }
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// Fraction of records whose share for action `a` lies strictly inside
    /// (0, 1) — the informative subsample for that pair.
    pub fn interior_share_fraction(&self, a: usize) -> f64 {
        let count = (0..self.n())
            .filter(|&i| matches!(self.q(i, a), Some(q) if q > 0.0 && q < 1.0))
            .count();
        count as f64 / self.n() as f64
    }
}

/// Simulates the propensity table for every record of the dataset.
///
/// For record `i` and draw `s`, a point is drawn uniformly from the
/// `delta`-ball around the normalized continuous context, mapped back to raw
/// coordinates (discrete columns held fixed), and the policy is evaluated
/// there; `p_hat(a | x_i)` is the compensated average over draws of the
/// policy's probability vector. Records are independent work items with
/// per-record substreams keyed off `plan`, so the result is bit-identical
/// under any thread count.
pub fn compute_aps(
    dataset: &LogDataset,
    policy: &PolicySpec,
    delta: f64,
    draws: usize,
    plan: &RngPlan,
) -> Result<ApsTable, ApsError> {
    if draws == 0 {
        return Err(ApsError::ZeroDraws);
    }
    let contexts = &dataset.contexts;
    if !contexts.is_normalized() {
        return Err(ApsError::ContextsNotNormalized);
    }
    let pc = contexts.continuous_dim();
    let sampler = BallSampler::new(pc, delta)?;
    let m = policy.action_count();
    let n = dataset.n();
    let values = contexts.continuous();

    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>, ApsError> {
            let mut rng = plan.stream_for(i as u64, "aps");
            let center: Vec<f64> = (0..pc).map(|j| values[(i, j)]).collect();
            let mut point = vec![0.0; pc];
            let mut policy_input = vec![0.0; contexts.input_dim()];
            let mut probs = vec![0.0; m];
            let mut acc = vec![CompensatedSum::new(); m];
            for _ in 0..draws {
                sampler.sample_into(&center, &mut rng, &mut point);
                contexts.policy_input_from_normalized(i, &point, &mut policy_input);
                policy.evaluate_into(&policy_input, &mut probs)?;
                for (sum, &p) in acc.iter_mut().zip(&probs) {
                    sum.add(p);
                }
            }
            Ok(acc.iter().map(|s| s.total() / draws as f64).collect())
        })
        .collect::<Result<_, _>>()?;

    let mut p_hat = Array2::<f64>::zeros((n, m));
    let mut q_hat = Array2::<f64>::from_elem((n, m.saturating_sub(1)), f64::NAN);
    for (i, row) in rows.iter().enumerate() {
        for a in 0..m {
            p_hat[(i, a)] = row[a];
        }
        for a in 2..=m {
            let denom = row[a - 1] + row[0];
            if denom > 0.0 {
                q_hat[(i, a - 2)] = row[a - 1] / denom;
            }
        }
    }

    Ok(ApsTable {
        p_hat,
        q_hat,
        delta,
        draws,
        master_seed: plan.master_seed(),
    })
}

/// Limiting propensity score of a deterministic halfspace policy at signed
/// normalized offset `v` from its boundary, for continuous dimension `p`.
///
/// Equal to the volume fraction of the unit `p`-ball on the chosen side of a
/// hyperplane at distance `|v|` from the center:
/// `1 - I_{1-v^2}((p+1)/2, 1/2) / 2` for `v >= 0`, and the mirror image for
/// `v < 0`. Monotone increasing in `v` with value `1/2` on the boundary.
pub fn k_profile(v: f64, p: usize) -> Result<f64, ApsError> {
    if p == 0 {
        return Err(ApsError::ZeroDimension);
    }
    if !(v > -1.0 && v < 1.0) {
        return Err(ApsError::OffsetOutOfRange(v));
    }
    let x = 1.0 - v * v;
    let half_cap = 0.5 * regularized_incomplete_beta((p as f64 + 1.0) / 2.0, 0.5, x)?;
    Ok(if v >= 0.0 { 1.0 - half_cap } else { half_cap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ContextMatrix;
    use crate::policy::{CmpOp, Condition, TableRow};
    use ndarray::Array2;

    /// m-action halfspace policy: action 1 iff `x[0] >= threshold`, else action 2.
    pub(crate) fn halfspace_policy(m: usize, threshold: f64) -> PolicySpec {
        let mut first = vec![0.0; m];
        first[0] = 1.0;
        let mut second = vec![0.0; m];
        second[1] = 1.0;
        PolicySpec::TableLookup {
            m,
            rows: vec![TableRow {
                conditions: vec![Condition {
                    feature: 0,
                    op: CmpOp::Ge,
                    threshold,
                }],
                probs: first,
            }],
            fallback: second,
        }
    }

    fn normalized_dataset(values: Array2<f64>, m: usize) -> LogDataset {
        let n = values.nrows();
        let contexts = ContextMatrix::pre_normalized(values, Array2::zeros((n, 0))).unwrap();
        LogDataset::with_default_labels(contexts, vec![1; n], vec![0.0; n], m).unwrap()
    }

    #[test]
    fn ball_draws_stay_strictly_inside() {
        let plan = RngPlan::new(11);
        let mut rng = plan.stream_for(0, "ball");
        for &dim in &[1usize, 2, 7, 100] {
            let sampler = BallSampler::new(dim, 0.8).unwrap();
            let center = vec![1.5; dim];
            let mut out = vec![0.0; dim];
            for _ in 0..200 {
                sampler.sample_into(&center, &mut rng, &mut out);
                let r2: f64 = out
                    .iter()
                    .zip(&center)
                    .map(|(a, c)| (a - c) * (a - c))
                    .sum();
                assert!(r2.sqrt() < 0.8, "dim {dim}: radius {}", r2.sqrt());
            }
        }
    }

    #[test]
    fn radial_cdf_follows_t_to_the_p() {
        // In dimension p, P(r <= t * delta) = t^p; at p = 2, t = 1/2 -> 1/4.
        let plan = RngPlan::new(7);
        let mut rng = plan.stream_for(0, "radial");
        let sampler = BallSampler::new(2, 1.0).unwrap();
        let center = [0.0, 0.0];
        let mut out = [0.0, 0.0];
        let total = 100_000;
        let mut hits = 0usize;
        for _ in 0..total {
            sampler.sample_into(&center, &mut rng, &mut out);
            if (out[0] * out[0] + out[1] * out[1]).sqrt() <= 0.5 {
                hits += 1;
            }
        }
        let frac = hits as f64 / total as f64;
        let sigma = (0.25f64 * 0.75 / total as f64).sqrt();
        assert!(
            (frac - 0.25).abs() < 3.0 * sigma,
            "fraction {frac}, want 0.25 +- {}",
            3.0 * sigma
        );
    }

    #[test]
    fn one_dimensional_ball_is_uniform_interval() {
        // KS test against U(center - delta, center + delta) at alpha = 0.01.
        let plan = RngPlan::new(3);
        let mut rng = plan.stream_for(0, "ks");
        let sampler = BallSampler::new(1, 2.0).unwrap();
        let center = [0.5];
        let mut out = [0.0];
        let n = 10_000;
        let mut draws: Vec<f64> = Vec::with_capacity(n);
        for _ in 0..n {
            sampler.sample_into(&center, &mut rng, &mut out);
            draws.push((out[0] - (center[0] - 2.0)) / 4.0); // map to U(0,1)
        }
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ks: f64 = 0.0;
        for (i, &u) in draws.iter().enumerate() {
            let upper = (i + 1) as f64 / n as f64 - u;
            let lower = u - i as f64 / n as f64;
            ks = ks.max(upper.max(lower));
        }
        // Critical value at alpha = 0.01: 1.62762 / sqrt(n).
        let critical = 1.6276236307187292 / (n as f64).sqrt();
        assert!(ks < critical, "KS statistic {ks} >= {critical}");
    }

    #[test]
    fn zero_bandwidth_rejected() {
        assert!(matches!(
            BallSampler::new(3, 0.0),
            Err(ApsError::NonPositiveBandwidth(_))
        ));
        assert!(matches!(
            BallSampler::new(3, -1.0),
            Err(ApsError::NonPositiveBandwidth(_))
        ));
    }

    #[test]
    fn uniform_policy_scores_are_exact() {
        use rand::Rng;
        let plan = RngPlan::new(21);
        let mut rng = plan.stream_for(9, "ctx");
        let values = Array2::from_shape_fn((40, 3), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let ds = normalized_dataset(values, 5);
        let policy = PolicySpec::Uniform { m: 5 };
        for &(delta, draws) in &[(0.1, 1usize), (1.0, 100), (2.5, 157)] {
            let table = compute_aps(&ds, &policy, delta, draws, &plan).unwrap();
            for i in 0..ds.n() {
                for a in 1..=5 {
                    assert_eq!(table.p(i, a), 0.2, "delta {delta}, draws {draws}");
                }
                for a in 2..=5 {
                    assert_eq!(table.q(i, a), Some(0.5));
                }
            }
        }
    }

    #[test]
    fn boundary_record_scores_one_half() {
        let mut values = Array2::zeros((1, 2));
        values[(0, 0)] = 0.0;
        let ds = normalized_dataset(values, 2);
        let policy = halfspace_policy(2, 0.0);
        let draws = 4000;
        let table = compute_aps(&ds, &policy, 0.7, draws, &RngPlan::new(2)).unwrap();
        let sigma = 0.5 / (draws as f64).sqrt();
        assert!((table.p(0, 1) - 0.5).abs() < 3.0 * sigma);
        assert!((table.p(0, 1) + table.p(0, 2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn deep_interior_record_is_one_hot() {
        let mut values = Array2::zeros((2, 2));
        values[(0, 0)] = 5.0; // far inside the action-1 region, delta = 1
        values[(1, 0)] = -5.0;
        let ds = normalized_dataset(values, 2);
        let policy = halfspace_policy(2, 0.0);
        let table = compute_aps(&ds, &policy, 1.0, 200, &RngPlan::new(4)).unwrap();
        assert_eq!(table.p(0, 1), 1.0);
        assert_eq!(table.p(0, 2), 0.0);
        assert_eq!(table.q(0, 2), Some(0.0));
        assert_eq!(table.p(1, 1), 0.0);
        assert_eq!(table.p(1, 2), 1.0);
        assert_eq!(table.q(1, 2), Some(1.0));
    }

    #[test]
    fn undefined_share_marked_not_zero() {
        // Three actions; policy never assigns action 1 or 3 near the record:
        // p_1 = p_3 = 0 so q(3) is 0/0 -> undefined.
        let values = Array2::zeros((1, 2));
        let ds = normalized_dataset(values, 3);
        let policy = PolicySpec::LinearGreedy {
            intercepts: vec![0.0, 1.0, 0.0],
            coefficients: vec![vec![0.0, 0.0]; 3],
        };
        let table = compute_aps(&ds, &policy, 0.5, 50, &RngPlan::new(8)).unwrap();
        assert_eq!(table.q(0, 2), Some(1.0));
        assert_eq!(table.q(0, 3), None);
    }

    #[test]
    fn scores_sum_to_one_for_proper_policies() {
        use rand::Rng;
        let plan = RngPlan::new(33);
        let mut rng = plan.stream_for(0, "sum");
        let values = Array2::from_shape_fn((25, 2), |_| rng.gen::<f64>() * 4.0 - 2.0);
        let ds = normalized_dataset(values, 3);
        let policy = PolicySpec::QuantileGate {
            gate_feature: 0,
            gate_threshold: 0.5,
            inside: Box::new(PolicySpec::Uniform { m: 3 }),
            outside: Box::new(PolicySpec::LinearGreedy {
                intercepts: vec![0.0, 0.2, -0.1],
                coefficients: vec![vec![1.0, 0.0], vec![-1.0, 0.5], vec![0.0, -0.7]],
            }),
        };
        let table = compute_aps(&ds, &policy, 0.8, 64, &plan).unwrap();
        for i in 0..ds.n() {
            let total: f64 = (1..=3).map(|a| table.p(i, a)).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_result_is_bit_identical_to_sequential() {
        use rand::Rng;
        let plan = RngPlan::new(17);
        let mut rng = plan.stream_for(2, "par");
        let values = Array2::from_shape_fn((64, 3), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let ds = normalized_dataset(values, 2);
        let policy = halfspace_policy(2, 0.1);

        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let multi = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap();
        let t1 = single.install(|| compute_aps(&ds, &policy, 0.6, 80, &plan).unwrap());
        let t2 = multi.install(|| compute_aps(&ds, &policy, 0.6, 80, &plan).unwrap());
        for i in 0..ds.n() {
            for a in 1..=2 {
                assert_eq!(t1.p(i, a).to_bits(), t2.p(i, a).to_bits());
            }
        }
    }

    #[test]
    fn share_reproducible_from_scores() {
        use rand::Rng;
        let plan = RngPlan::new(12);
        let mut rng = plan.stream_for(0, "share");
        let values = Array2::from_shape_fn((30, 2), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let ds = normalized_dataset(values, 3);
        let policy = PolicySpec::Uniform { m: 3 };
        let table = compute_aps(&ds, &policy, 0.4, 32, &plan).unwrap();
        for i in 0..30 {
            for a in 2..=3 {
                let q = table.q(i, a).unwrap();
                let re = table.p(i, a) / (table.p(i, a) + table.p(i, 1));
                assert!((q - re).abs() < 1e-15);
                assert_eq!(table.q_between(i, a, 1), Some(re));
            }
        }
    }

    #[test]
    fn monte_carlo_error_scales_inverse_sqrt_draws() {
        // Std of the boundary score over independent seeds should shrink by
        // about sqrt(16) = 4 from S = 100 to S = 1600; allow a factor of 2.
        let mut values = Array2::zeros((1, 3));
        values[(0, 0)] = 0.2; // near but not on the boundary
        let ds = normalized_dataset(values, 2);
        let policy = halfspace_policy(2, 0.0);
        let spread = |draws: usize| {
            let scores: Vec<f64> = (0..40)
                .map(|seed| {
                    compute_aps(&ds, &policy, 0.9, draws, &RngPlan::new(1000 + seed))
                        .unwrap()
                        .p(0, 1)
                })
                .collect();
            crate::numeric::population_moments(&scores).1.sqrt()
        };
        let ratio = spread(100) / spread(1600);
        assert!(
            ratio > 2.0 && ratio < 8.0,
            "std ratio {ratio}, expected about 4"
        );
    }

    #[test]
    fn profile_is_half_on_the_boundary() {
        for &p in &[1usize, 2, 10, 100] {
            assert!((k_profile(0.0, p).unwrap() - 0.5).abs() < 1e-14);
        }
    }

    #[test]
    fn profile_approaches_one_inside() {
        for &p in &[1usize, 3, 25] {
            assert!(k_profile(0.999, p).unwrap() > 0.99);
            assert!(k_profile(-0.999, p).unwrap() < 0.01);
        }
    }

    #[test]
    fn profile_monotone_in_offset() {
        // Strictly increasing until the cap fraction saturates in f64 (at
        // large p the profile hits 1.0 exactly well before v -> 1).
        for &p in &[1usize, 2, 17, 100] {
            let mut prev = -1.0;
            for i in -9..=9 {
                let v = i as f64 / 10.0;
                let k = k_profile(v, p).unwrap();
                if prev < 1.0 && k < 1.0 {
                    assert!(k > prev, "p = {p}, v = {v}: {k} vs {prev}");
                } else {
                    assert!(k >= prev, "p = {p}, v = {v}: {k} vs {prev}");
                }
                prev = k;
            }
        }
    }

    #[test]
    fn profile_dimension_one_is_interval_fraction() {
        // A 1-D ball is an interval: k(v) = (1 + v) / 2, so k(1/2) = 3/4.
        assert!((k_profile(0.5, 1).unwrap() - 0.75).abs() < 1e-13);
        for i in -9..=9 {
            let v = i as f64 / 10.0;
            let want = (1.0 + v) / 2.0;
            assert!((k_profile(v, 1).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn profile_matches_independent_disk_oracle() {
        // p = 2 cap fraction from plane geometry: frozen from
        // 1 - (acos(v) - v sqrt(1-v^2)) / pi at v = 1/2.
        assert!((k_profile(0.5, 2).unwrap() - 0.8044988905221147).abs() < 1e-12);
        assert!((k_profile(-0.5, 2).unwrap() - 0.19550110947788532).abs() < 1e-12);
    }

    #[test]
    fn profile_matches_brute_force_cap_volume() {
        // MC oracle: fraction of uniform ball draws with x0 >= -v.
        let plan = RngPlan::new(77);
        let mut rng = plan.stream_for(0, "cap");
        for &(v, p) in &[(0.25f64, 3usize), (-0.4, 5), (0.5, 10)] {
            let sampler = BallSampler::new(p, 1.0).unwrap();
            let center = vec![0.0; p];
            let mut out = vec![0.0; p];
            let total = 200_000;
            let mut hits = 0usize;
            for _ in 0..total {
                sampler.sample_into(&center, &mut rng, &mut out);
                if v + out[0] >= 0.0 {
                    hits += 1;
                }
            }
            let frac = hits as f64 / total as f64;
            let k = k_profile(v, p).unwrap();
            let sigma = (k * (1.0 - k) / total as f64).sqrt();
            assert!(
                (frac - k).abs() < 4.0 * sigma,
                "v={v} p={p}: mc {frac} vs profile {k}"
            );
        }
    }

    #[test]
    fn profile_rejects_out_of_range() {
        assert!(matches!(
            k_profile(1.0, 3),
            Err(ApsError::OffsetOutOfRange(_))
        ));
        assert!(matches!(
            k_profile(-1.5, 3),
            Err(ApsError::OffsetOutOfRange(_))
        ));
        assert!(matches!(k_profile(0.5, 0), Err(ApsError::ZeroDimension)));
    }

    #[test]
    fn simulated_scores_track_profile_near_halfspace() {
        // Records placed at normalized offsets v from a halfspace boundary;
        // the simulated score should match the profile within MC noise plus
        // a small slack (the boundary here is exactly flat).
        let p = 4;
        let delta = 0.5;
        let offsets = [-0.6, -0.2, 0.0, 0.3, 0.7];
        let mut values = Array2::zeros((offsets.len(), p));
        for (i, &v) in offsets.iter().enumerate() {
            values[(i, 0)] = v * delta;
        }
        let ds = normalized_dataset(values, 2);
        let policy = halfspace_policy(2, 0.0);
        let draws = 3000;
        let table = compute_aps(&ds, &policy, delta, draws, &RngPlan::new(5)).unwrap();
        for (i, &v) in offsets.iter().enumerate() {
            let k = k_profile(v, p).unwrap();
            let sigma = (k * (1.0 - k) / draws as f64).sqrt();
            assert!(
                (table.p(i, 1) - k).abs() < 3.0 * sigma + 0.01,
                "offset {v}: simulated {} vs profile {k}",
                table.p(i, 1)
            );
        }
    }

    #[test]
    fn discrete_columns_held_fixed_during_sampling() {
        // The policy keys on the discrete column (input index 1, after the
        // single continuous feature). However large the ball, every draw for
        // a record must keep that record's discrete value, so the scores
        // stay one-hot per group.
        let n = 6;
        let values = Array2::zeros((n, 1));
        let mut discrete = Array2::zeros((n, 1));
        for i in 0..n {
            discrete[(i, 0)] = (i % 2) as i64;
        }
        let contexts = ContextMatrix::pre_normalized(values, discrete).unwrap();
        let ds = LogDataset::with_default_labels(contexts, vec![1; n], vec![0.0; n], 2).unwrap();
        let policy = PolicySpec::TableLookup {
            m: 2,
            rows: vec![TableRow {
                conditions: vec![Condition {
                    feature: 1,
                    op: CmpOp::Ge,
                    threshold: 0.5,
                }],
                probs: vec![0.0, 1.0],
            }],
            fallback: vec![1.0, 0.0],
        };
        let table = compute_aps(&ds, &policy, 50.0, 64, &RngPlan::new(6)).unwrap();
        for i in 0..n {
            if i % 2 == 1 {
                assert_eq!(table.p(i, 2), 1.0);
            } else {
                assert_eq!(table.p(i, 1), 1.0);
            }
        }
    }

    #[test]
    fn policy_dimension_mismatch_propagates() {
        let values = Array2::zeros((3, 2));
        let ds = normalized_dataset(values, 2);
        let policy = PolicySpec::LinearGreedy {
            intercepts: vec![0.0, 1.0],
            coefficients: vec![vec![1.0, 2.0, 3.0]; 2], // expects 3 features
        };
        assert!(matches!(
            compute_aps(&ds, &policy, 0.5, 10, &RngPlan::new(1)),
            Err(ApsError::Policy(PolicyError::DimensionMismatch { .. }))
        ));
    }

    #[test]
    fn csv_export_shape_and_na_marker() {
        let values = Array2::zeros((2, 1));
        let ds = normalized_dataset(values, 3);
        let policy = PolicySpec::LinearGreedy {
            intercepts: vec![0.0, 1.0, 0.0],
            coefficients: vec![vec![0.0]; 3],
        };
        let table = compute_aps(&ds, &policy, 0.5, 10, &RngPlan::new(1)).unwrap();
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "record,p_hat_1,p_hat_2,p_hat_3,q_hat_2,q_hat_3");
        assert!(lines[1].ends_with(",1,NA")); // q_2 = 1, q_3 undefined
    }
}
