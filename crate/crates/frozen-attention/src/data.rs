//! Synthetic data generators and the Ames housing ingestion pipeline.
//!
//! Every generator draws from [`Rng`] substreams keyed by the caller's seed,
//! so a `(seed, stream)` pair always yields the same samples.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::algorithms::{ridge_regression, Pair};
use crate::error::{Error, Result};
use crate::linalg::{matmul, Matrix};
use crate::rng::Rng;
use crate::trainer::Dataset;

/// Shift and scale that map the `10·N(0,1) − 5` inputs of the function
/// experiment back to standard normal before they enter the model. The map
/// is affine, so it composes with the model's own input linear connection.
pub const SIM_F_X_SHIFT: f64 = 5.0;
pub const SIM_F_X_SCALE: f64 = 10.0;

/// One prompt of the `f(wᵀx − y)x` experiment; columns are tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimFSample {
    /// `d x n`, entries `10·N(0,1) − 5`.
    pub x: Matrix,
    /// `d x n`, column `i` is the coefficient paired with token `i`.
    pub w: Matrix,
    pub y: Vec<f64>,
    /// `d x n`, column `i` is `tanh(w_iᵀx_i − y_i) x_i`.
    pub label: Matrix,
}

/// The label `tanh(w_iᵀx_i − y_i) x_i` of every token.
pub fn sim_f_label(x: &Matrix, w: &Matrix, y: &[f64]) -> Matrix {
    let (d, n) = x.shape();
    let mut out = Matrix::zeros(d, n);
    for i in 0..n {
        let u: f64 = (0..d).map(|r| w.get(r, i) * x.get(r, i)).sum::<f64>() - y[i];
        let t = u.tanh();
        for r in 0..d {
            out.set(r, i, t * x.get(r, i));
        }
    }
    out
}

/// `count` prompts with `n` tokens of dimension `d`.
pub fn gen_sim_f_data(n: usize, d: usize, count: usize, seed: u64) -> Result<Vec<SimFSample>> {
    if n == 0 || d == 0 {
        return Err(Error::Domain("sim-f data needs positive n and d".into()));
    }
    let mut rng = Rng::substream(seed, 0x51);
    Ok((0..count)
        .map(|_| {
            let x = Matrix::from_fn(d, n, |_, _| 10.0 * rng.normal() - 5.0);
            let w = Matrix::from_fn(d, n, |_, _| rng.normal());
            let y: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let label = sim_f_label(&x, &w, &y);
            SimFSample { x, w, y, label }
        })
        .collect())
}

/// Model inputs `[(x_i + 5)/10; y_i; w_i]` (`2d + 1` rows; the first `d + 1`
/// rows feed keys and values, the rest feed queries) with the labels.
pub fn sim_f_dataset(samples: &[SimFSample]) -> Result<Dataset> {
    let mut inputs = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    for s in samples {
        let (d, n) = s.x.shape();
        let mut z = Matrix::zeros(2 * d + 1, n);
        for i in 0..n {
            for r in 0..d {
                z.set(r, i, (s.x.get(r, i) + SIM_F_X_SHIFT) / SIM_F_X_SCALE);
                z.set(d + 1 + r, i, s.w.get(r, i));
            }
            z.set(d, i, s.y[i]);
        }
        inputs.push(z);
        targets.push(s.label.clone());
    }
    Dataset::new(inputs, targets)
}

/// Statistical model whose weights a prompt carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Lasso,
    Ridge,
    Linear,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Lasso, Task::Ridge, Task::Linear];

    pub fn name(self) -> &'static str {
        match self {
            Task::Lasso => "lasso",
            Task::Ridge => "ridge",
            Task::Linear => "linear",
        }
    }

    /// Stream id offset so tasks never share random draws.
    fn stream(self) -> u64 {
        match self {
            Task::Lasso => 1,
            Task::Ridge => 2,
            Task::Linear => 3,
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lasso" => Ok(Task::Lasso),
            "ridge" => Ok(Task::Ridge),
            "linear" => Ok(Task::Linear),
            other => Err(Error::Parse(format!("unknown task {other:?} (lasso|ridge|linear)"))),
        }
    }
}

/// Parameters of the synthetic regression prompts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    pub n: usize,
    pub d: usize,
    /// Noise standard deviation of `Y = Xw + ε`.
    pub sigma: f64,
    /// Ridge penalty of the closed-form prompt weights.
    pub ridge_lambda: f64,
    /// Probability of zeroing each coefficient for Lasso prompts.
    pub zero_prob: f64,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            n: 8,
            d: 4,
            sigma: 0.1,
            ridge_lambda: 5.0,
            zero_prob: 0.5,
        }
    }
}

/// One regression prompt: data, generating coefficient and prompt weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSample {
    pub task: Task,
    /// `d x n`, entries `2·N(0,1) − 1`.
    pub x: Matrix,
    pub w_true: Vec<f64>,
    pub y: Vec<f64>,
    /// Weights the prompt carries: the generating coefficient for Lasso and
    /// linear tasks, the closed-form ridge solution for ridge.
    pub prompt: Vec<f64>,
}

/// `count` prompts of one task.
pub fn gen_task_data(task: Task, params: &TaskParams, count: usize, seed: u64) -> Result<Vec<TaskSample>> {
    let TaskParams {
        n,
        d,
        sigma,
        ridge_lambda,
        zero_prob,
    } = *params;
    if n == 0 || d == 0 {
        return Err(Error::Domain("task data needs positive n and d".into()));
    }
    if !(sigma >= 0.0) || !(ridge_lambda > 0.0) || !(0.0..=1.0).contains(&zero_prob) {
        return Err(Error::Domain(format!("invalid task parameters {params:?}")));
    }
    let mut rng = Rng::substream(seed, 0x7a00 + task.stream());
    (0..count)
        .map(|_| {
            let x = Matrix::from_fn(d, n, |_, _| 2.0 * rng.normal() - 1.0);
            let mut w_true: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            if task == Task::Lasso {
                for v in &mut w_true {
                    if rng.bernoulli(zero_prob) {
                        *v = 0.0;
                    }
                }
            }
            let y: Vec<f64> = (0..n)
                .map(|i| {
                    let clean: f64 = (0..d).map(|r| x.get(r, i) * w_true[r]).sum();
                    if sigma > 0.0 {
                        clean + sigma * rng.normal()
                    } else {
                        clean
                    }
                })
                .collect();
            let prompt = match task {
                Task::Ridge => {
                    let pairs: Vec<Pair> = (0..n).map(|i| (x.col(i), y[i])).collect();
                    ridge_regression(&pairs, ridge_lambda)?
                }
                Task::Lasso | Task::Linear => w_true.clone(),
            };
            Ok(TaskSample {
                task,
                x,
                w_true,
                y,
                prompt,
            })
        })
        .collect()
}

/// Tokens `[x_i; w; e_i]` (`2d + n` rows) with target `x_iᵀw` (`1 x n`).
pub fn prompt_tokens(x: &Matrix, w: &[f64]) -> Result<(Matrix, Matrix)> {
    let (d, n) = x.shape();
    if w.len() != d {
        return Err(Error::Shape {
            op: "prompt_tokens",
            left: (d, n),
            right: (w.len(), 1),
        });
    }
    let mut z = Matrix::zeros(2 * d + n, n);
    z.set_block(0, 0, x)?;
    for i in 0..n {
        for (r, &wr) in w.iter().enumerate() {
            z.set(d + r, i, wr);
        }
        z.set(2 * d + i, i, 1.0);
    }
    let target = Matrix::from_fn(1, n, |_, i| (0..d).map(|r| x.get(r, i) * w[r]).sum());
    Ok((z, target))
}

pub fn task_dataset(samples: &[TaskSample]) -> Result<Dataset> {
    let mut inputs = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    for s in samples {
        let (z, t) = prompt_tokens(&s.x, &s.prompt)?;
        inputs.push(z);
        targets.push(t);
    }
    Dataset::new(inputs, targets)
}

/// A random target head and its input for the head-count experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSample {
    /// `d x n`, entries `2·N(0,1) − 1`.
    pub x: Matrix,
    /// `d_h x d`.
    pub w_k: Matrix,
    /// `d_h x d`.
    pub w_q: Matrix,
    /// `d x d`.
    pub w_v: Matrix,
}

impl HeadSample {
    /// `W_V X · softmax((W_K X)ᵀ W_Q X)`.
    pub fn output(&self) -> Result<Matrix> {
        let k = matmul(&self.w_k, &self.x)?;
        let q = matmul(&self.w_q, &self.x)?;
        let v = matmul(&self.w_v, &self.x)?;
        crate::attention::attend(&k, &q, &v, 1.0, None)
    }

    pub fn weights(&self, group: Group) -> &Matrix {
        match group {
            Group::Key => &self.w_k,
            Group::Query => &self.w_q,
            Group::Value => &self.w_v,
        }
    }
}

/// Which projection of the target head a sub-model learns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Key,
    Query,
    Value,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Key, Group::Query, Group::Value];

    pub fn name(self) -> &'static str {
        match self {
            Group::Key => "K",
            Group::Query => "Q",
            Group::Value => "V",
        }
    }
}

/// `count` random heads; requires `d_h ≤ n` and `d ≤ n` so every weight row
/// fits in its own token.
pub fn gen_head_data(n: usize, d: usize, d_h: usize, count: usize, seed: u64, stream: u64) -> Result<Vec<HeadSample>> {
    if n == 0 || d == 0 || d_h == 0 || d_h > n || d > n {
        return Err(Error::Domain(format!(
            "head data needs 0 < d_h, d <= n (got n={n}, d={d}, d_h={d_h})"
        )));
    }
    let mut rng = Rng::substream(seed, 0x4800 + stream);
    let mut gauss = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| rng.normal());
    Ok((0..count)
        .map(|_| {
            let x = gauss(d, n).map(|v| 2.0 * v - 1.0);
            HeadSample {
                x,
                w_k: gauss(d_h, d),
                w_q: gauss(d_h, d),
                w_v: gauss(d, d),
            }
        })
        .collect())
}

/// Sub-model input `[X; Wᵀ (zero-padded to n columns); I_n]` (`2d + n` rows):
/// token `j` carries row `j` of the projection and its own position.
pub fn head_group_input(x: &Matrix, w: &Matrix) -> Result<Matrix> {
    let (d, n) = x.shape();
    if w.cols() != d || w.rows() > n {
        return Err(Error::Shape {
            op: "head_group_input",
            left: x.shape(),
            right: w.shape(),
        });
    }
    let mut z = Matrix::zeros(2 * d + n, n);
    z.set_block(0, 0, x)?;
    z.set_block(d, 0, &w.transpose())?;
    z.set_block(2 * d, 0, &Matrix::identity(n))?;
    Ok(z)
}

/// Dataset for the sub-model of `group`: inputs as in [`head_group_input`],
/// targets `W X`.
pub fn head_group_dataset(samples: &[HeadSample], group: Group) -> Result<Dataset> {
    let mut inputs = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    for s in samples {
        let w = s.weights(group);
        inputs.push(head_group_input(&s.x, w)?);
        targets.push(matmul(w, &s.x)?);
    }
    Dataset::new(inputs, targets)
}

/// Feature count the Ames pipeline is expected to produce.
pub const AMES_EXPECTED_FEATURES: usize = 262;
/// Column holding the sale price.
pub const AMES_TARGET: &str = "SalePrice";
/// Identifier columns excluded from the features.
pub const AMES_ID_COLUMNS: [&str; 2] = ["Order", "PID"];

/// Preprocessed Ames data: one row per observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmesData {
    /// `rows x features`: standardised numeric columns then one-hot columns.
    pub features: Matrix,
    /// `ln(SalePrice)`.
    pub target: Vec<f64>,
    pub feature_names: Vec<String>,
    pub numeric_columns: usize,
    pub categorical_columns: usize,
    pub imputed_entries: usize,
    pub warnings: Vec<String>,
}

fn is_missing(v: &str) -> bool {
    let t = v.trim();
    t.is_empty() || t == "NA" || t == "NaN"
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let m = values.len();
    if m == 0 {
        0.0
    } else if m % 2 == 1 {
        values[m / 2]
    } else {
        0.5 * (values[m / 2 - 1] + values[m / 2])
    }
}

/// Parse and preprocess an Ames-format CSV, in this order: log-transform the
/// target, one-hot encode categorical columns (missing is its own level,
/// levels sorted), replace missing numeric entries with the column median,
/// standardise numeric columns (population standard deviation).
pub fn ingest_ames(path: impl AsRef<Path>) -> Result<AmesData> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    ingest_ames_str(&text)
}

pub fn ingest_ames_str(text: &str) -> Result<AmesData> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let target_col = headers
        .iter()
        .position(|h| h == AMES_TARGET)
        .ok_or_else(|| Error::Parse(format!("missing target column {AMES_TARGET}")))?;
    let mut rows: Vec<Vec<String>> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != headers.len() {
            return Err(Error::Parse(format!(
                "line {line}: expected {} fields, found {}",
                headers.len(),
                record.len()
            )));
        }
        rows.push(record.iter().map(str::to_string).collect());
    }
    if rows.is_empty() {
        return Err(Error::Parse("no data rows".into()));
    }
    let mut target = Vec::with_capacity(rows.len());
    for (k, row) in rows.iter().enumerate() {
        let raw = &row[target_col];
        let price: f64 = raw
            .trim()
            .parse()
            .ok()
            .filter(|p: &f64| *p > 0.0)
            .ok_or_else(|| Error::Parse(format!("line {}: invalid {AMES_TARGET} {raw:?}", k + 2)))?;
        target.push(price.ln());
    }

    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| c != target_col && !AMES_ID_COLUMNS.contains(&headers[c].as_str()))
        .collect();
    let mut numeric: Vec<(String, Vec<Option<f64>>)> = Vec::new();
    let mut categorical: Vec<(String, Vec<String>)> = Vec::new();
    for &c in &feature_cols {
        let parsed: Option<Vec<Option<f64>>> = rows
            .iter()
            .map(|r| {
                if is_missing(&r[c]) {
                    Some(None)
                } else {
                    r[c].trim().parse::<f64>().ok().map(Some)
                }
            })
            .collect();
        match parsed {
            Some(vals) if vals.iter().any(Option::is_some) => numeric.push((headers[c].clone(), vals)),
            _ => categorical.push((
                headers[c].clone(),
                rows.iter()
                    .map(|r| if is_missing(&r[c]) { "NA".to_string() } else { r[c].trim().to_string() })
                    .collect(),
            )),
        }
    }

    let m = rows.len();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut names = Vec::new();
    let mut imputed = 0;
    // Categorical columns are encoded first so that median imputation and
    // standardisation see only the numeric block, in the documented order.
    let mut onehot: Vec<(String, Vec<f64>)> = Vec::new();
    for (name, vals) in &categorical {
        let levels: BTreeSet<&str> = vals.iter().map(String::as_str).collect();
        for level in levels {
            onehot.push((
                format!("{name}={level}"),
                vals.iter().map(|v| if v == level { 1.0 } else { 0.0 }).collect(),
            ));
        }
    }
    for (name, vals) in &numeric {
        let mut present: Vec<f64> = vals.iter().flatten().copied().collect();
        let med = median(&mut present);
        let filled: Vec<f64> = vals
            .iter()
            .map(|v| {
                v.unwrap_or_else(|| {
                    imputed += 1;
                    med
                })
            })
            .collect();
        let mean = filled.iter().sum::<f64>() / m as f64;
        let var = filled.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        let sd = var.sqrt();
        columns.push(
            filled
                .iter()
                .map(|v| if sd > 0.0 { (v - mean) / sd } else { v - mean })
                .collect(),
        );
        names.push(name.clone());
    }
    for (name, col) in onehot {
        names.push(name);
        columns.push(col);
    }
    let p = columns.len();
    let features = Matrix::from_fn(m, p, |r, c| columns[c][r]);
    let mut warnings = Vec::new();
    if p != AMES_EXPECTED_FEATURES {
        warnings.push(format!(
            "preprocessing produced {p} features (expected about {AMES_EXPECTED_FEATURES}; the count depends on the category encoding)"
        ));
    }
    Ok(AmesData {
        features,
        target,
        feature_names: names,
        numeric_columns: numeric.len(),
        categorical_columns: categorical.len(),
        imputed_entries: imputed,
        warnings,
    })
}

/// Seeded 80/20 split of `rows` indices into `(train, test)`.
pub fn train_test_split(rows: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..rows).collect();
    Rng::substream(seed, 0x5b17).shuffle(&mut idx);
    let cut = ((rows as f64) * train_fraction).round() as usize;
    let test = idx.split_off(cut.min(rows));
    (idx, test)
}

/// Level counts per categorical column, for reporting.
pub fn level_counts(data: &AmesData) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for name in &data.feature_names {
        if let Some((col, _)) = name.split_once('=') {
            *out.entry(col.to_string()).or_insert(0) += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ridge_prompt_on_identity_design() {
        // X = I_2, Y = (1, 1), λ = 5 → w = (1/6, 1/6).
        let pairs: Vec<Pair> = vec![(vec![1.0, 0.0], 1.0), (vec![0.0, 1.0], 1.0)];
        let w = ridge_regression(&pairs, 5.0).unwrap();
        for v in w {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn noiseless_linear_task_is_exact() {
        let params = TaskParams {
            sigma: 0.0,
            ..TaskParams::default()
        };
        for s in gen_task_data(Task::Linear, &params, 5, 3).unwrap() {
            for i in 0..params.n {
                let clean: f64 = (0..params.d).map(|r| s.x.get(r, i) * s.w_true[r]).sum();
                assert_eq!(s.y[i], clean);
            }
        }
    }

    #[test]
    fn sim_f_labels_recompute() {
        for s in gen_sim_f_data(4, 3, 10, 1).unwrap() {
            assert_eq!(sim_f_label(&s.x, &s.w, &s.y), s.label);
        }
    }

    #[test]
    fn median_imputation_and_standardisation() {
        let csv = "Order,PID,Lot Area,Street,SalePrice\n1,10,1,Pave,100\n2,11,NA,Grvl,200\n3,12,3,NA,300\n4,13,5,Pave,400\n";
        let a = ingest_ames_str(csv).unwrap();
        assert_eq!(a.numeric_columns, 1);
        assert_eq!(a.imputed_entries, 1);
        // Missing entry replaced by median(1, 3, 5) = 3, then standardised.
        let raw = [1.0, 3.0, 3.0, 5.0];
        let mean = 3.0;
        let sd = (raw.iter().map(|v: &f64| (v - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        for (r, v) in raw.iter().enumerate() {
            assert!((a.features.get(r, 0) - (v - mean) / sd).abs() < 1e-12);
        }
        assert_eq!(a.feature_names[1..], ["Street=Grvl", "Street=NA", "Street=Pave"]);
        assert!((a.target[2] - 300f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn malformed_row_reports_line() {
        let csv = "A,SalePrice\n1,100\n2\n";
        let err = ingest_ames_str(csv).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }
}
