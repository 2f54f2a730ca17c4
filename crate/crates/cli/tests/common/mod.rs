#![allow(dead_code)]

//! Shared fixtures for the CLI test suites.

use aps_ope::data::{write_csv, ContextMatrix, CsvSchema, LogDataset, MissingPolicy};
use aps_ope::policy::{PolicySpec, Scorer};
use aps_ope::rng::RngPlan;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use std::path::{Path, PathBuf};
use std::process::Command;

pub fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_aps-ope"))
}

/// A binary-action log generated by a deterministic score-threshold policy
/// with constant treatment effects on two outcomes.
pub struct ThresholdFixture {
    pub dir: PathBuf,
    pub data: PathBuf,
    pub ml_policy: PathBuf,
    pub pi_policy: PathBuf,
    pub config: PathBuf,
    pub mean_primary: f64,
    pub beta_primary: f64,
    pub beta_secondary: f64,
    pub n: usize,
}

/// Writes a log CSV (`y, a, x1, x2, y2`), the logging policy (treat when
/// `x1 >= 0`), a counterfactual policy treating more people (`x1 >= -0.4`),
/// and a config file wiring them together.
pub fn threshold_fixture(dir: &Path, n: usize, seed: u64, deltas: &[f64]) -> ThresholdFixture {
    let beta_primary = 2.0;
    let beta_secondary = 0.5;
    let plan = RngPlan::new(seed);
    let mut rng = plan.stream_for(0, "fixture");

    let ml = PolicySpec::ScoreThreshold {
        scorer: Scorer::Linear {
            intercept: 0.0,
            coefficients: vec![1.0, 0.0],
        },
        threshold: 0.0,
    };
    let pi = PolicySpec::ScoreThreshold {
        scorer: Scorer::Linear {
            intercept: 0.0,
            coefficients: vec![1.0, 0.0],
        },
        threshold: -0.4,
    };

    let mut values = Array2::<f64>::zeros((n, 2));
    let mut actions = Vec::with_capacity(n);
    let mut rewards = Vec::with_capacity(n);
    let mut secondary = Vec::with_capacity(n);
    for i in 0..n {
        let x0: f64 = rng.sample(StandardNormal);
        let x1: f64 = rng.sample(StandardNormal);
        values[(i, 0)] = x0;
        values[(i, 1)] = x1;
        let treated = x0 >= 0.0;
        let a = if treated { 2 } else { 1 };
        let d = treated as u64 as f64;
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        actions.push(a);
        rewards.push(0.4 * x1 + beta_primary * d + 0.25 * e1);
        secondary.push(-0.3 * x1 + beta_secondary * d + 0.25 * e2);
    }
    let mean_primary = rewards.iter().sum::<f64>() / n as f64;

    let contexts = ContextMatrix::from_continuous(values);
    let dataset = LogDataset::with_default_labels(contexts, actions, rewards, 2).unwrap();

    let schema = CsvSchema {
        reward: "y".into(),
        action: "a".into(),
        features: vec!["x1".into(), "x2".into()],
        discrete_features: vec![],
        secondary_reward: None,
        actions: Some(vec!["1".into(), "2".into()]),
        missing: MissingPolicy::Error,
    };
    // write_csv emits the dataset's own columns; append the second outcome.
    let data = dir.join("log.csv");
    {
        write_csv(&data, &dataset, &schema).unwrap();
        let text = std::fs::read_to_string(&data).unwrap();
        let mut out = String::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                out.push_str(line);
                out.push_str(",y2\n");
            } else {
                out.push_str(line);
                out.push_str(&format!(",{}\n", secondary[i - 1]));
            }
        }
        std::fs::write(&data, out).unwrap();
    }

    let ml_policy = dir.join("ml.json");
    std::fs::write(&ml_policy, serde_json::to_string_pretty(&ml).unwrap()).unwrap();
    let pi_policy = dir.join("pi.json");
    std::fs::write(&pi_policy, serde_json::to_string_pretty(&pi).unwrap()).unwrap();

    let deltas_list = deltas
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(", ");
    let config = dir.join("config.toml");
    std::fs::write(
        &config,
        format!(
            r#"[data]
path = "log.csv"
reward = "y"
action = "a"
features = ["x1", "x2"]
secondary_reward = "y2"
actions = ["1", "2"]

[evaluate]
ml_policy = "ml.json"
pi_policy = "pi.json"
deltas = [{deltas_list}]
seed = 11
aps_draws = 200
out_dir = "out"

[aps]
ml_policy = "ml.json"
deltas = [{deltas_list}]
seed = 11
aps_draws = 200
out_dir = "out_aps"
"#
        ),
    )
    .unwrap();

    ThresholdFixture {
        dir: dir.to_path_buf(),
        data,
        ml_policy,
        pi_policy,
        config,
        mean_primary,
        beta_primary,
        beta_secondary,
        n,
    }
}

/// Five-action uniform-policy log for propensity audits.
pub fn uniform_fixture(dir: &Path, n: usize, seed: u64) -> (PathBuf, PathBuf, PathBuf) {
    let plan = RngPlan::new(seed);
    let mut rng = plan.stream_for(0, "uniform-fixture");
    let mut values = Array2::<f64>::zeros((n, 2));
    let mut actions = Vec::with_capacity(n);
    for i in 0..n {
        values[(i, 0)] = rng.sample::<f64, _>(StandardNormal);
        values[(i, 1)] = rng.sample::<f64, _>(StandardNormal);
        actions.push(rng.gen_range(1usize..=5));
    }
    let rewards: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    let dataset = LogDataset::with_default_labels(
        ContextMatrix::from_continuous(values),
        actions,
        rewards,
        5,
    )
    .unwrap();
    let schema = CsvSchema {
        reward: "y".into(),
        action: "a".into(),
        features: vec!["x1".into(), "x2".into()],
        discrete_features: vec![],
        secondary_reward: None,
        actions: Some((1..=5).map(|a| a.to_string()).collect()),
        missing: MissingPolicy::Error,
    };
    let data = dir.join("uniform.csv");
    write_csv(&data, &dataset, &schema).unwrap();

    let ml = dir.join("uniform_ml.json");
    std::fs::write(
        &ml,
        serde_json::to_string_pretty(&PolicySpec::Uniform { m: 5 }).unwrap(),
    )
    .unwrap();

    let config = dir.join("uniform_config.toml");
    std::fs::write(
        &config,
        r#"[data]
path = "uniform.csv"
reward = "y"
action = "a"
features = ["x1", "x2"]
actions = ["1", "2", "3", "4", "5"]

[aps]
ml_policy = "uniform_ml.json"
deltas = [0.7]
seed = 3
aps_draws = 50
out_dir = "out_uniform"
"#,
    )
    .unwrap();
    (data, ml, config)
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}
