//! `aps-ope`: off-policy evaluation of contextual-bandit policies from logs.
//!
//! Subcommands:
//! - `simulate`: run the synthetic experiment suite and write a Monte-Carlo
//!   report (CSV + JSON).
//! - `evaluate`: estimate the value of a counterfactual policy on a real log
//!   file, with per-pair contrasts, robust standard errors, and optional
//!   effect ratios across two outcome columns.
//! - `aps`: write the per-record simulated propensity table for auditing.
//!
//! Every command is a pure function of its configuration and input files:
//! identical inputs produce byte-identical outputs, whatever `--threads`
//! says. The seed is mandatory — there is no wall-clock fallback.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure. On failure a machine-readable error document goes to stdout;
//! human-readable progress stays on stderr.

mod config;

use aps_ope::aps::compute_aps;
use aps_ope::data::{load_csv, LogDataset};
use aps_ope::estimator::{effect_ratio_values, evaluate_policy_value, ValueEstimate};
use aps_ope::policy::PolicySpec;
use aps_ope::rng::RngPlan;
use aps_ope::simlab::{run_experiment, DgpSpec, EffectMode, EstimatorKind, Experiment, McReport};
use clap::{Args, Parser, Subcommand};
use config::{
    load_file_config, require, resolve_schema, validate_deltas, validate_draws, ApsPlan,
    EvaluatePlan, SimulatePlan, SCHEMA_VERSION,
};
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Numeric(_) => "numeric",
        }
    }
}

#[derive(Parser)]
#[command(
    name = "aps-ope",
    version,
    about = "Off-policy evaluation for contextual bandits, including deterministic logging policies"
)]
struct Cli {
    /// Worker threads (default: all cores). Outputs do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Suppress progress output on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a synthetic experiment and report estimator bias/SD/RMSE.
    Simulate(SimulateArgs),
    /// Estimate a counterfactual policy's value from a log file.
    Evaluate(EvaluateArgs),
    /// Export the simulated propensity table for a log file.
    Aps(ApsArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// TOML or JSON config file (section [simulate]).
    #[arg(long)]
    config: Option<PathBuf>,
    /// exp1 (randomized segment + greedy rule) or exp2 (trained UCB table).
    #[arg(long)]
    experiment: Option<String>,
    /// constant or nonconstant mean reward differences.
    #[arg(long)]
    effect_mode: Option<String>,
    /// Log size per replication.
    #[arg(long)]
    n: Option<usize>,
    /// Number of Monte-Carlo replications.
    #[arg(long)]
    reps: Option<usize>,
    /// Comma-separated bandwidths.
    #[arg(long, value_delimiter = ',')]
    deltas: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Simulation draws per propensity score.
    #[arg(long)]
    aps_draws: Option<usize>,
    /// Fresh context draws for the ground-truth value.
    #[arg(long)]
    truth_draws: Option<usize>,
    /// Auxiliary training sample size.
    #[arg(long)]
    train_n: Option<usize>,
    /// Estimators to run (aps, mean_diff_ab, mean_diff_full, direct_method).
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<String>>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Full-size run (n = 50,000, reps = 1,000) — slow.
    #[arg(long)]
    paper_scale: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// TOML or JSON config file (sections [data] and [evaluate]).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Log CSV path (overrides data.path).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Logging-policy JSON document.
    #[arg(long)]
    ml_policy: Option<PathBuf>,
    /// Counterfactual-policy JSON document.
    #[arg(long)]
    pi_policy: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    deltas: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    aps_draws: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ApsArgs {
    /// TOML or JSON config file (sections [data] and [aps]).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    ml_policy: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    deltas: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    aps_draws: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let quiet = cli.quiet;
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("warning: could not set thread pool size: {e}");
        }
    }
    if let Err(e) = run(cli) {
        let payload = serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "status": "error",
            "kind": e.kind(),
            "code": e.code(),
            "message": e.to_string(),
        });
        println!("{}", serde_json::to_string_pretty(&payload).unwrap());
        if !quiet {
            eprintln!("error: {e}");
        }
        std::process::exit(e.code());
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let progress = |msg: &str| {
        if !cli.quiet {
            eprintln!("{msg}");
        }
    };
    match cli.command {
        Command::Simulate(args) => cmd_simulate(args, &progress),
        Command::Evaluate(args) => cmd_evaluate(args, &progress),
        Command::Aps(args) => cmd_aps(args, &progress),
    }
}

// ── simulate ────────────────────────────────────────────────────────────

fn parse_experiment(name: &str) -> Result<Experiment, CliError> {
    match name {
        "exp1" => Ok(Experiment::Exp1),
        "exp2" => Ok(Experiment::Exp2),
        other => Err(CliError::Config(format!(
            "simulate.experiment: expected exp1 or exp2, got {other:?}"
        ))),
    }
}

fn parse_effect_mode(name: &str) -> Result<EffectMode, CliError> {
    match name {
        "constant" => Ok(EffectMode::Constant),
        "nonconstant" | "non_constant" => Ok(EffectMode::NonConstant),
        other => Err(CliError::Config(format!(
            "simulate.effect_mode: expected constant or nonconstant, got {other:?}"
        ))),
    }
}

fn resolve_simulate(args: SimulateArgs) -> Result<SimulatePlan, CliError> {
    let file = load_file_config(args.config.as_deref())?;
    let section = file.simulate.unwrap_or_default();

    let experiment = match args.experiment.as_deref() {
        Some(name) => parse_experiment(name)?,
        None => require(section.experiment, "simulate.experiment")?,
    };
    let effect_mode = match args.effect_mode.as_deref() {
        Some(name) => parse_effect_mode(name)?,
        None => section.effect_mode.unwrap_or(EffectMode::Constant),
    };
    let seed = require(args.seed.or(section.seed), "simulate.seed")?;
    let (default_n, default_reps) = if args.paper_scale {
        (50_000, 1_000)
    } else {
        (10_000, 100)
    };
    let n = args.n.or(section.n).unwrap_or(default_n);
    let reps = args.reps.or(section.reps).unwrap_or(default_reps);
    let deltas = args
        .deltas
        .or(section.deltas)
        .unwrap_or_else(|| vec![0.1, 0.5, 1.0, 2.5]);
    validate_deltas(&deltas, "simulate.deltas")?;
    if reps < 2 {
        return Err(CliError::Config(
            "simulate.reps: need at least 2 replications".into(),
        ));
    }

    let mut spec = DgpSpec::new(experiment, effect_mode, n, seed);
    if let Some(v) = args.aps_draws.or(section.aps_draws) {
        spec.aps_draws = v;
    }
    if let Some(v) = args.truth_draws.or(section.truth_draws) {
        spec.truth_draws = v;
    }
    if let Some(v) = args.train_n.or(section.train_n) {
        spec.train_n = v;
    }
    validate_draws(spec.aps_draws, "simulate.aps_draws")?;

    let estimators = match args.estimators {
        Some(names) => parse_estimators(&names)?,
        None => section
            .estimators
            .unwrap_or_else(|| EstimatorKind::defaults_for(experiment)),
    };
    if estimators.is_empty() {
        return Err(CliError::Config(
            "simulate.estimators: need at least one estimator".into(),
        ));
    }

    Ok(SimulatePlan {
        spec,
        reps,
        deltas,
        estimators,
        out_dir: require(args.out_dir.or(section.out_dir), "simulate.out_dir")?,
        paper_scale: args.paper_scale,
    })
}

fn parse_estimators(names: &[String]) -> Result<Vec<EstimatorKind>, CliError> {
    names
        .iter()
        .map(|name| match name.as_str() {
            "aps" => Ok(EstimatorKind::Aps),
            "mean_diff_ab" => Ok(EstimatorKind::MeanDiffAbSample),
            "mean_diff_full" => Ok(EstimatorKind::MeanDiffFullSample),
            "direct_method" => Ok(EstimatorKind::DirectMethod),
            other => Err(CliError::Config(format!(
                "simulate.estimators: unknown estimator {other:?}"
            ))),
        })
        .collect()
}

#[derive(Serialize)]
struct ReportArtifact {
    schema_version: u32,
    #[serde(flatten)]
    report: McReport,
}

fn cmd_simulate(args: SimulateArgs, progress: &dyn Fn(&str)) -> Result<(), CliError> {
    let plan = resolve_simulate(args)?;
    if plan.paper_scale {
        eprintln!(
            "warning: paper-scale run (n = {}, reps = {}) — this takes a long time",
            plan.spec.n, plan.reps
        );
    }
    progress(&format!(
        "simulate: {:?}/{:?}, n = {}, reps = {}, deltas = {:?}, seed = {}",
        plan.spec.experiment, plan.spec.effect_mode, plan.spec.n, plan.reps, plan.deltas,
        plan.spec.seed
    ));

    let report = run_experiment(&plan.spec, &plan.estimators, &plan.deltas, plan.reps)
        .map_err(|e| CliError::Numeric(e.to_string()))?;

    std::fs::create_dir_all(&plan.out_dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", plan.out_dir.display())))?;
    let csv_path = plan.out_dir.join("mc_report.csv");
    let mut csv_bytes = Vec::new();
    report
        .write_csv(&mut csv_bytes)
        .map_err(|e| CliError::Data(e.to_string()))?;
    write_bytes(&csv_path, &csv_bytes)?;

    let json_path = plan.out_dir.join("mc_report.json");
    let artifact = ReportArtifact {
        schema_version: SCHEMA_VERSION,
        report,
    };
    write_json(&json_path, &artifact)?;

    progress(&format!(
        "simulate: wrote {} and {}",
        csv_path.display(),
        json_path.display()
    ));
    Ok(())
}

// ── evaluate ────────────────────────────────────────────────────────────

fn resolve_evaluate(args: EvaluateArgs) -> Result<EvaluatePlan, CliError> {
    let file = load_file_config(args.config.as_deref())?;
    let mut data = file.data.unwrap_or_default();
    if let Some(path) = args.data {
        data.path = Some(path);
    }
    let (data_path, schema, assume_normalized) = resolve_schema(&data)?;
    let section = file.evaluate.unwrap_or_default();

    let deltas = require(args.deltas.or(section.deltas), "evaluate.deltas")?;
    validate_deltas(&deltas, "evaluate.deltas")?;
    let aps_draws = args.aps_draws.or(section.aps_draws).unwrap_or(100);
    validate_draws(aps_draws, "evaluate.aps_draws")?;

    Ok(EvaluatePlan {
        data_path,
        schema,
        assume_normalized,
        ml_policy: require(args.ml_policy.or(section.ml_policy), "evaluate.ml_policy")?,
        pi_policy: require(args.pi_policy.or(section.pi_policy), "evaluate.pi_policy")?,
        deltas,
        seed: require(args.seed.or(section.seed), "evaluate.seed")?,
        aps_draws,
        out_dir: require(args.out_dir.or(section.out_dir), "evaluate.out_dir")?,
        chaining: section.chaining.unwrap_or(true),
        ratio_epsilon: section.ratio_epsilon.unwrap_or(1e-12),
    })
}

#[derive(Serialize)]
struct RatioEntry {
    action: usize,
    numerator_beta: f64,
    denominator_beta: f64,
    ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Serialize)]
struct DeltaResult {
    delta: f64,
    aps_draws: usize,
    value: ValueEstimate,
    #[serde(skip_serializing_if = "Option::is_none")]
    secondary_value: Option<ValueEstimate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ratios: Option<Vec<RatioEntry>>,
    chaining_log: Vec<String>,
}

#[derive(Serialize)]
struct EvaluationArtifact {
    schema_version: u32,
    seed: u64,
    data_rows: usize,
    action_labels: Vec<String>,
    results: Vec<DeltaResult>,
}

fn load_policy(path: &Path) -> Result<PolicySpec, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read policy {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("policy {}: {e}", path.display())))
}

fn load_dataset(
    path: &Path,
    schema: &aps_ope::data::CsvSchema,
    assume_normalized: bool,
    progress: &dyn Fn(&str),
) -> Result<(LogDataset, Option<Vec<f64>>), CliError> {
    let loaded = load_csv(path, schema).map_err(|e| CliError::Data(e.to_string()))?;
    for w in &loaded.warnings {
        progress(&format!("warning: {w}"));
    }
    let dataset = if assume_normalized {
        loaded.dataset.assume_normalized()
    } else {
        loaded
            .dataset
            .normalized()
            .map_err(|e| CliError::Data(e.to_string()))?
    };
    Ok((dataset, loaded.secondary_rewards))
}

fn check_policy_arity(policy: &PolicySpec, m: usize, name: &str) -> Result<(), CliError> {
    if policy.action_count() != m {
        return Err(CliError::Data(format!(
            "{name} policy covers {} actions but the data has {m}",
            policy.action_count()
        )));
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs, progress: &dyn Fn(&str)) -> Result<(), CliError> {
    let plan = resolve_evaluate(args)?;
    let (dataset, secondary) =
        load_dataset(&plan.data_path, &plan.schema, plan.assume_normalized, progress)?;
    let ml = load_policy(&plan.ml_policy)?;
    let pi = load_policy(&plan.pi_policy)?;
    check_policy_arity(&ml, dataset.m, "logging")?;
    check_policy_arity(&pi, dataset.m, "counterfactual")?;
    progress(&format!(
        "evaluate: {} rows, m = {}, deltas = {:?}, seed = {}",
        dataset.n(),
        dataset.m,
        plan.deltas,
        plan.seed
    ));

    let secondary_ds = secondary
        .map(|rewards| dataset.with_rewards(rewards))
        .transpose()
        .map_err(|e| CliError::Data(e.to_string()))?;

    let rng = RngPlan::new(plan.seed);
    let mut results = Vec::with_capacity(plan.deltas.len());
    for &delta in &plan.deltas {
        let table = compute_aps(&dataset, &ml, delta, plan.aps_draws, &rng)
            .map_err(|e| CliError::Numeric(e.to_string()))?;
        let (value, mut log) = evaluate_policy_value(&dataset, &table, &ml, &pi, plan.chaining)
            .map_err(|e| CliError::Numeric(e.to_string()))?;

        let (secondary_value, ratios) = match &secondary_ds {
            Some(ds2) => {
                let (value2, log2) = evaluate_policy_value(ds2, &table, &ml, &pi, plan.chaining)
                    .map_err(|e| CliError::Numeric(e.to_string()))?;
                log.extend(log2.into_iter().map(|l| format!("secondary: {l}")));
                let ratios: Vec<RatioEntry> = value
                    .per_pair
                    .iter()
                    .zip(&value2.per_pair)
                    .map(|(num, den)| {
                        match effect_ratio_values(num.beta_hat, den.beta_hat, plan.ratio_epsilon) {
                            Ok(r) => RatioEntry {
                                action: num.action,
                                numerator_beta: num.beta_hat,
                                denominator_beta: den.beta_hat,
                                ratio: Some(r),
                                error: None,
                            },
                            Err(e) => RatioEntry {
                                action: num.action,
                                numerator_beta: num.beta_hat,
                                denominator_beta: den.beta_hat,
                                ratio: None,
                                error: Some(e.to_string()),
                            },
                        }
                    })
                    .collect();
                (Some(value2), Some(ratios))
            }
            None => (None, None),
        };

        progress(&format!("evaluate: delta = {delta} -> v_hat = {}", value.v_hat));
        results.push(DeltaResult {
            delta,
            aps_draws: plan.aps_draws,
            value,
            secondary_value,
            ratios,
            chaining_log: log,
        });
    }

    std::fs::create_dir_all(&plan.out_dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", plan.out_dir.display())))?;
    let artifact = EvaluationArtifact {
        schema_version: SCHEMA_VERSION,
        seed: plan.seed,
        data_rows: dataset.n(),
        action_labels: dataset.action_labels.clone(),
        results,
    };
    let path = plan.out_dir.join("evaluation.json");
    write_json(&path, &artifact)?;
    progress(&format!("evaluate: wrote {}", path.display()));
    Ok(())
}

// ── aps ─────────────────────────────────────────────────────────────────

fn resolve_aps(args: ApsArgs) -> Result<ApsPlan, CliError> {
    let file = load_file_config(args.config.as_deref())?;
    let mut data = file.data.unwrap_or_default();
    if let Some(path) = args.data {
        data.path = Some(path);
    }
    let (data_path, schema, assume_normalized) = resolve_schema(&data)?;
    let section = file.aps.unwrap_or_default();

    let deltas = require(args.deltas.or(section.deltas), "aps.deltas")?;
    validate_deltas(&deltas, "aps.deltas")?;
    let aps_draws = args.aps_draws.or(section.aps_draws).unwrap_or(100);
    validate_draws(aps_draws, "aps.aps_draws")?;

    Ok(ApsPlan {
        data_path,
        schema,
        assume_normalized,
        ml_policy: require(args.ml_policy.or(section.ml_policy), "aps.ml_policy")?,
        deltas,
        seed: require(args.seed.or(section.seed), "aps.seed")?,
        aps_draws,
        out_dir: require(args.out_dir.or(section.out_dir), "aps.out_dir")?,
    })
}

#[derive(Serialize)]
struct ApsDeltaSummary {
    delta: f64,
    /// Fraction of records with the pairwise share strictly inside (0, 1),
    /// one entry per action `2..=m`.
    interior_fraction: Vec<f64>,
    file: String,
}

#[derive(Serialize)]
struct ApsArtifact {
    schema_version: u32,
    seed: u64,
    aps_draws: usize,
    data_rows: usize,
    summaries: Vec<ApsDeltaSummary>,
}

fn cmd_aps(args: ApsArgs, progress: &dyn Fn(&str)) -> Result<(), CliError> {
    let plan = resolve_aps(args)?;
    let (dataset, _secondary) =
        load_dataset(&plan.data_path, &plan.schema, plan.assume_normalized, progress)?;
    let ml = load_policy(&plan.ml_policy)?;
    check_policy_arity(&ml, dataset.m, "logging")?;
    progress(&format!(
        "aps: {} rows, deltas = {:?}, draws = {}, seed = {}",
        dataset.n(),
        plan.deltas,
        plan.aps_draws,
        plan.seed
    ));

    std::fs::create_dir_all(&plan.out_dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", plan.out_dir.display())))?;
    let rng = RngPlan::new(plan.seed);
    let mut summaries = Vec::with_capacity(plan.deltas.len());
    for &delta in &plan.deltas {
        let table = compute_aps(&dataset, &ml, delta, plan.aps_draws, &rng)
            .map_err(|e| CliError::Numeric(e.to_string()))?;
        let file = format!("aps_delta_{delta}.csv");
        let mut bytes = Vec::new();
        table
            .write_csv(&mut bytes)
            .map_err(|e| CliError::Data(e.to_string()))?;
        write_bytes(&plan.out_dir.join(&file), &bytes)?;
        let interior: Vec<f64> = (2..=dataset.m)
            .map(|a| table.interior_share_fraction(a))
            .collect();
        progress(&format!(
            "aps: delta = {delta}, interior fractions {interior:?}"
        ));
        summaries.push(ApsDeltaSummary {
            delta,
            interior_fraction: interior,
            file,
        });
    }

    let artifact = ApsArtifact {
        schema_version: SCHEMA_VERSION,
        seed: plan.seed,
        aps_draws: plan.aps_draws,
        data_rows: dataset.n(),
        summaries,
    };
    let path = plan.out_dir.join("aps_summary.json");
    write_json(&path, &artifact)?;
    progress(&format!("aps: wrote {}", path.display()));
    Ok(())
}

// ── output helpers ──────────────────────────────────────────────────────

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Numeric(format!("serialization failed: {e}")))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}
