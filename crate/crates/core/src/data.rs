//! Log datasets, context normalization, and CSV ingestion.
//!
//! A [`LogDataset`] holds aligned `(reward, context, action)` records.
//! Actions are stored 1-based and contiguous (`1..=m`, action 1 is the
//! baseline); external labels are remapped at the I/O edge and kept for
//! reporting. Continuous context columns are z-scored in place by
//! [`normalize_contexts`], the per-column location/scale is retained so the
//! original coordinates can be reconstructed when evaluating policies that
//! were defined on raw features.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("arrays have mismatched lengths: {0}")]
    LengthMismatch(String),
    #[error("action label {label} at row {row} is outside the declared set")]
    UnknownAction { label: String, row: usize },
    #[error("action {action} at row {row} is outside 1..={m}")]
    ActionOutOfRange { action: usize, row: usize, m: usize },
    #[error("missing value at row {row}, column {column}")]
    MissingValue { row: usize, column: String },
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("column {0} not found in header")]
    ColumnNotFound(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Location/scale of each continuous column established by normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    /// Shift applied per column (pre-normalization mean; 0 for skipped columns).
    pub col_means: Vec<f64>,
    /// Scale applied per column (pre-normalization std; 1 for skipped columns).
    pub col_stds: Vec<f64>,
    /// Columns left untouched because their variance was exactly zero.
    pub zero_variance: Vec<usize>,
}

/// Context features: `n x p_c` continuous values plus optional discrete columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextMatrix {
    values: Array2<f64>,
    discrete: Array2<i64>,
    normalization: Option<Normalization>,
}

impl ContextMatrix {
    pub fn new(values: Array2<f64>, discrete: Array2<i64>) -> Result<Self, DataError> {
        if discrete.ncols() > 0 && discrete.nrows() != values.nrows() {
            return Err(DataError::LengthMismatch(format!(
                "continuous rows {} vs discrete rows {}",
                values.nrows(),
                discrete.nrows()
            )));
        }
        let discrete = if discrete.ncols() == 0 {
            Array2::zeros((values.nrows(), 0))
        } else {
            discrete
        };
        Ok(Self {
            values,
            discrete,
            normalization: None,
        })
    }

    pub fn from_continuous(values: Array2<f64>) -> Self {
        let n = values.nrows();
        Self {
            values,
            discrete: Array2::zeros((n, 0)),
            normalization: None,
        }
    }

    /// Marks already-standardized data as normalized (identity transform).
    pub fn pre_normalized(values: Array2<f64>, discrete: Array2<i64>) -> Result<Self, DataError> {
        let p = values.ncols();
        let mut cm = Self::new(values, discrete)?;
        cm.normalization = Some(Normalization {
            col_means: vec![0.0; p],
            col_stds: vec![1.0; p],
            zero_variance: Vec::new(),
        });
        Ok(cm)
    }

    /// Attaches an identity transform to data that is already standardized.
    pub fn into_pre_normalized(mut self) -> ContextMatrix {
        let p = self.continuous_dim();
        self.normalization = Some(Normalization {
            col_means: vec![0.0; p],
            col_stds: vec![1.0; p],
            zero_variance: Vec::new(),
        });
        self
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn continuous_dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn discrete_dim(&self) -> usize {
        self.discrete.ncols()
    }

    /// Width of the policy input vector: continuous then discrete columns.
    pub fn input_dim(&self) -> usize {
        self.continuous_dim() + self.discrete_dim()
    }

    pub fn continuous(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn discrete(&self) -> ArrayView2<'_, i64> {
        self.discrete.view()
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalization.is_some()
    }

    /// Policy input row in original (raw) coordinates.
    pub fn policy_row_into(&self, i: usize, out: &mut [f64]) {
        let pc = self.continuous_dim();
        debug_assert_eq!(out.len(), self.input_dim());
        match &self.normalization {
            Some(norm) => {
                for j in 0..pc {
                    out[j] = self.values[(i, j)] * norm.col_stds[j] + norm.col_means[j];
                }
            }
            None => {
                for j in 0..pc {
                    out[j] = self.values[(i, j)];
                }
            }
        }
        for j in 0..self.discrete_dim() {
            out[pc + j] = self.discrete[(i, j)] as f64;
        }
    }

    /// Maps a perturbed point in normalized coordinates back to a raw policy
    /// input, holding record `i`'s discrete columns fixed.
    pub fn policy_input_from_normalized(&self, i: usize, point: &[f64], out: &mut [f64]) {
        let pc = self.continuous_dim();
        debug_assert_eq!(point.len(), pc);
        debug_assert_eq!(out.len(), self.input_dim());
        match &self.normalization {
            Some(norm) => {
                for j in 0..pc {
                    out[j] = point[j] * norm.col_stds[j] + norm.col_means[j];
                }
            }
            None => out[..pc].copy_from_slice(point),
        }
        for j in 0..self.discrete_dim() {
            out[pc + j] = self.discrete[(i, j)] as f64;
        }
    }
}

/// Z-scores each continuous column (population std); zero-variance columns
/// are left unscaled and flagged rather than divided by zero.
///
/// Normalizing an already-normalized matrix composes the stored transforms,
/// so raw coordinates remain recoverable.
pub fn normalize_contexts(raw: &ContextMatrix) -> Result<ContextMatrix, DataError> {
    let n = raw.n();
    if n == 0 {
        return Err(DataError::EmptyDataset);
    }
    let pc = raw.continuous_dim();
    let mut values = raw.values.clone();
    let mut col_means = vec![0.0; pc];
    let mut col_stds = vec![1.0; pc];
    let mut zero_variance = Vec::new();

    for j in 0..pc {
        let mut acc = crate::numeric::CompensatedSum::new();
        for i in 0..n {
            acc.add(values[(i, j)]);
        }
        let mean = acc.total() / n as f64;
        let mut var_acc = crate::numeric::CompensatedSum::new();
        for i in 0..n {
            let d = values[(i, j)] - mean;
            var_acc.add(d * d);
        }
        let var = var_acc.total() / n as f64;
        if var <= 0.0 {
            zero_variance.push(j);
            continue;
        }
        let std = var.sqrt();
        for i in 0..n {
            values[(i, j)] = (values[(i, j)] - mean) / std;
        }
        col_means[j] = mean;
        col_stds[j] = std;
    }

    // Compose with any existing transform: raw = s1 * (s2 * x + m2) + m1.
    let normalization = match raw.normalization() {
        Some(prev) => {
            let mut zv = prev.zero_variance.clone();
            for &j in &zero_variance {
                if !zv.contains(&j) {
                    zv.push(j);
                }
            }
            zv.sort_unstable();
            Normalization {
                col_means: (0..pc)
                    .map(|j| prev.col_stds[j] * col_means[j] + prev.col_means[j])
                    .collect(),
                col_stds: (0..pc).map(|j| prev.col_stds[j] * col_stds[j]).collect(),
                zero_variance: zv,
            }
        }
        None => Normalization {
            col_means,
            col_stds,
            zero_variance,
        },
    };

    Ok(ContextMatrix {
        values,
        discrete: raw.discrete.clone(),
        normalization: Some(normalization),
    })
}

/// Aligned log records `(Y_i, X_i, A_i)` with actions in `1..=m`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogDataset {
    pub contexts: ContextMatrix,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub m: usize,
    /// External label for each internal action, index `a - 1`.
    pub action_labels: Vec<String>,
}

impl LogDataset {
    pub fn new(
        contexts: ContextMatrix,
        actions: Vec<usize>,
        rewards: Vec<f64>,
        m: usize,
        action_labels: Vec<String>,
    ) -> Result<Self, DataError> {
        let n = contexts.n();
        if n == 0 {
            return Err(DataError::EmptyDataset);
        }
        if actions.len() != n || rewards.len() != n {
            return Err(DataError::LengthMismatch(format!(
                "contexts {n}, actions {}, rewards {}",
                actions.len(),
                rewards.len()
            )));
        }
        if action_labels.len() != m {
            return Err(DataError::LengthMismatch(format!(
                "m = {m} but {} action labels",
                action_labels.len()
            )));
        }
        for (row, &a) in actions.iter().enumerate() {
            if a == 0 || a > m {
                return Err(DataError::ActionOutOfRange { action: a, row, m });
            }
        }
        Ok(Self {
            contexts,
            actions,
            rewards,
            m,
            action_labels,
        })
    }

    /// Convenience constructor with labels `"1"..="m"`.
    pub fn with_default_labels(
        contexts: ContextMatrix,
        actions: Vec<usize>,
        rewards: Vec<f64>,
        m: usize,
    ) -> Result<Self, DataError> {
        let labels = (1..=m).map(|a| a.to_string()).collect();
        Self::new(contexts, actions, rewards, m, labels)
    }

    pub fn n(&self) -> usize {
        self.rewards.len()
    }

    pub fn mean_reward(&self) -> f64 {
        crate::numeric::mean(&self.rewards)
    }

    /// Same records with z-scored contexts.
    pub fn normalized(&self) -> Result<LogDataset, DataError> {
        Ok(LogDataset {
            contexts: normalize_contexts(&self.contexts)?,
            actions: self.actions.clone(),
            rewards: self.rewards.clone(),
            m: self.m,
            action_labels: self.action_labels.clone(),
        })
    }

    /// Declares the stored contexts as already normalized (identity transform).
    pub fn assume_normalized(mut self) -> LogDataset {
        self.contexts = self.contexts.into_pre_normalized();
        self
    }

    /// Same records with a different reward column (e.g. a secondary outcome).
    pub fn with_rewards(&self, rewards: Vec<f64>) -> Result<LogDataset, DataError> {
        LogDataset::new(
            self.contexts.clone(),
            self.actions.clone(),
            rewards,
            self.m,
            self.action_labels.clone(),
        )
    }
}

/// What to do with rows containing missing values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MissingPolicy {
    /// Fail the load (default — silent data loss is worse).
    #[default]
    Error,
    /// Drop the affected row and record a warning.
    DropRow,
}

/// Column layout of a log CSV file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub reward: String,
    pub action: String,
    /// Continuous feature columns, in policy-input order.
    pub features: Vec<String>,
    /// Discrete feature columns, appended after the continuous block.
    #[serde(default)]
    pub discrete_features: Vec<String>,
    /// Optional second outcome column (for effect ratios).
    #[serde(default)]
    pub secondary_reward: Option<String>,
    /// Declared action label set; inferred from the data when absent.
    #[serde(default)]
    pub actions: Option<Vec<String>>,
    #[serde(default)]
    pub missing: MissingPolicy,
}

/// A loaded file: the dataset plus whatever the load had to decide.
#[derive(Debug)]
pub struct LoadedLog {
    pub dataset: LogDataset,
    pub secondary_rewards: Option<Vec<f64>>,
    pub warnings: Vec<String>,
    pub dropped_rows: usize,
}

fn is_missing(field: &str) -> bool {
    let t = field.trim();
    t.is_empty() || t.eq_ignore_ascii_case("nan") || t.eq_ignore_ascii_case("na")
}

fn parse_field(field: &str, row: usize, column: &str) -> Result<f64, DataError> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|e| DataError::Parse {
            row,
            column: column.to_string(),
            message: e.to_string(),
        })
}

/// Loads a UTF-8, headered CSV into a [`LogDataset`].
///
/// Actions are relabeled to contiguous `1..=m`: the declared set's order when
/// given in the schema, otherwise sorted distinct labels (numerically when
/// every label parses as an integer).
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<LoadedLog, DataError> {
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_path(path)?;
    let headers = reader.headers()?.clone();
    let col_index = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::ColumnNotFound(name.to_string()))
    };

    let reward_idx = col_index(&schema.reward)?;
    let action_idx = col_index(&schema.action)?;
    let feature_idx: Vec<usize> = schema
        .features
        .iter()
        .map(|f| col_index(f))
        .collect::<Result<_, _>>()?;
    let discrete_idx: Vec<usize> = schema
        .discrete_features
        .iter()
        .map(|f| col_index(f))
        .collect::<Result<_, _>>()?;
    let secondary_idx = match &schema.secondary_reward {
        Some(name) => Some(col_index(name)?),
        None => None,
    };

    let mut rewards = Vec::new();
    let mut secondary = Vec::new();
    let mut action_labels_raw = Vec::new();
    let mut cont_rows: Vec<Vec<f64>> = Vec::new();
    let mut disc_rows: Vec<Vec<i64>> = Vec::new();
    let mut warnings = Vec::new();
    let mut dropped_rows = 0usize;

    'rows: for (row_number, record) in reader.records().enumerate() {
        let record = record?;
        let row = row_number + 2; // 1-based, after the header

        let field_of = |idx: usize, column: &str| -> Result<Option<f64>, DataError> {
            let field = record.get(idx).unwrap_or("");
            if is_missing(field) {
                match schema.missing {
                    MissingPolicy::Error => Err(DataError::MissingValue {
                        row,
                        column: column.to_string(),
                    }),
                    MissingPolicy::DropRow => Ok(None),
                }
            } else {
                parse_field(field, row, column).map(Some)
            }
        };

        let mut cont = Vec::with_capacity(feature_idx.len());
        let mut disc = Vec::with_capacity(discrete_idx.len());

        macro_rules! take_or_drop {
            ($val:expr, $col:expr) => {
                match $val {
                    Some(v) => v,
                    None => {
                        dropped_rows += 1;
                        warnings.push(format!("row {row}: missing {}, dropped", $col));
                        continue 'rows;
                    }
                }
            };
        }

        let reward = take_or_drop!(field_of(reward_idx, &schema.reward)?, schema.reward);
        let sec = match secondary_idx {
            Some(idx) => Some(take_or_drop!(
                field_of(idx, schema.secondary_reward.as_deref().unwrap())?,
                "secondary reward"
            )),
            None => None,
        };
        for (k, &idx) in feature_idx.iter().enumerate() {
            cont.push(take_or_drop!(
                field_of(idx, &schema.features[k])?,
                schema.features[k]
            ));
        }
        for (k, &idx) in discrete_idx.iter().enumerate() {
            let v = take_or_drop!(
                field_of(idx, &schema.discrete_features[k])?,
                schema.discrete_features[k]
            );
            disc.push(v as i64);
        }
        let action_field = record.get(action_idx).unwrap_or("").trim().to_string();
        if is_missing(&action_field) {
            match schema.missing {
                MissingPolicy::Error => {
                    return Err(DataError::MissingValue {
                        row,
                        column: schema.action.clone(),
                    })
                }
                MissingPolicy::DropRow => {
                    dropped_rows += 1;
                    warnings.push(format!("row {row}: missing {}, dropped", schema.action));
                    continue 'rows;
                }
            }
        }

        rewards.push(reward);
        if let Some(s) = sec {
            secondary.push(s);
        }
        action_labels_raw.push((action_field, row));
        cont_rows.push(cont);
        disc_rows.push(disc);
    }

    if rewards.is_empty() {
        return Err(DataError::EmptyDataset);
    }

    // Establish the label -> 1..=m mapping.
    let labels: Vec<String> = match &schema.actions {
        Some(declared) => {
            for (label, row) in &action_labels_raw {
                if !declared.contains(label) {
                    return Err(DataError::UnknownAction {
                        label: label.clone(),
                        row: *row,
                    });
                }
            }
            declared.clone()
        }
        None => {
            let mut distinct: Vec<String> = action_labels_raw
                .iter()
                .map(|(l, _)| l.clone())
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
            let all_int = distinct.iter().all(|l| l.parse::<i64>().is_ok());
            if all_int {
                distinct.sort_by_key(|l| l.parse::<i64>().unwrap());
            }
            distinct
        }
    };
    let label_to_action: BTreeMap<&str, usize> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i + 1))
        .collect();
    let actions: Vec<usize> = action_labels_raw
        .iter()
        .map(|(l, _)| label_to_action[l.as_str()])
        .collect();

    let n = rewards.len();
    let pc = feature_idx.len();
    let pd = discrete_idx.len();
    let mut values = Array2::<f64>::zeros((n, pc));
    let mut discrete = Array2::<i64>::zeros((n, pd));
    for i in 0..n {
        for j in 0..pc {
            values[(i, j)] = cont_rows[i][j];
        }
        for j in 0..pd {
            discrete[(i, j)] = disc_rows[i][j];
        }
    }

    let contexts = ContextMatrix::new(values, discrete)?;
    let dataset = LogDataset::new(contexts, actions, rewards, labels.len(), labels)?;
    Ok(LoadedLog {
        dataset,
        secondary_rewards: if secondary_idx.is_some() {
            Some(secondary)
        } else {
            None
        },
        warnings,
        dropped_rows,
    })
}

/// Writes a dataset back out with the given feature column names.
///
/// Values are written as stored (call before normalizing to keep raw units);
/// floats use shortest round-trip formatting so `load_csv` restores them
/// bit-exactly. Only the dataset's own columns are written — a
/// `secondary_reward` declared in the schema is ignored here.
pub fn write_csv(path: &Path, dataset: &LogDataset, schema: &CsvSchema) -> Result<(), DataError> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec![schema.reward.clone(), schema.action.clone()];
    header.extend(schema.features.iter().cloned());
    header.extend(schema.discrete_features.iter().cloned());
    writer.write_record(&header)?;

    let contexts = &dataset.contexts;
    let mut line: Vec<String> = Vec::with_capacity(header.len());
    for i in 0..dataset.n() {
        line.clear();
        let mut s = String::new();
        write!(s, "{}", dataset.rewards[i]).unwrap();
        line.push(std::mem::take(&mut s));
        line.push(dataset.action_labels[dataset.actions[i] - 1].clone());
        for j in 0..contexts.continuous_dim() {
            let mut s = String::new();
            write!(s, "{}", contexts.continuous()[(i, j)]).unwrap();
            line.push(s);
        }
        for j in 0..contexts.discrete_dim() {
            line.push(contexts.discrete()[(i, j)].to_string());
        }
        writer.write_record(&line)?;
    }
    writer.flush()?;
    Ok(())
}
