//! Experiment orchestration: configs, per-seed runs, result records and
//! their on-disk artifacts.
//!
//! Each runner takes an [`ExperimentConfig`] and returns a [`ResultRecord`]
//! whose summary statistics are recomputed from the stored per-seed values.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::algorithms::{lasso_oracle, ridge_regression, Pair};
use crate::attention::attend;
use crate::data::{
    self, gen_head_data, gen_sim_f_data, gen_task_data, head_group_dataset, head_group_input, ingest_ames, sim_f_dataset,
    task_dataset, train_test_split, AmesData, Group, Task, TaskParams,
};
use crate::error::{Error, Result};
use crate::grid::{build_truncated_linear, plan_hardmax_beta, plan_truncated_linear, plan_with_heads, HardmaxCase};
use crate::linalg::{softmax_cols, sup_norm_diff, Matrix};
use crate::rng::{Rng, RNG_IDENTITY};
use crate::trainer::{freeze, train, Architecture, Dataset, FrontEnd, LossHistory, TrainConfig, TrainableModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    SimF,
    SimAttentionHeads,
    FrozenVsBaseline,
    Ames,
    VerifyLemmas,
    ConstructSweep,
}

impl ExperimentKind {
    pub fn tag(self) -> &'static str {
        match self {
            ExperimentKind::SimF => "sim_f",
            ExperimentKind::SimAttentionHeads => "sim_attention_heads",
            ExperimentKind::FrozenVsBaseline => "frozen_vs_baseline",
            ExperimentKind::Ames => "ames",
            ExperimentKind::VerifyLemmas => "verify_lemmas",
            ExperimentKind::ConstructSweep => "construct_sweep",
        }
    }
}

/// Every knob of every experiment; unused fields are still echoed into the
/// result metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Tokens per prompt.
    pub n: usize,
    /// Token (feature) dimension.
    pub d: usize,
    /// Rows of the target head's key/query projections.
    pub d_h: usize,
    /// Width of the trained models' embedding and of each head.
    pub hidden: usize,
    /// Head counts to run (the first entry for single-count experiments).
    pub heads: Vec<usize>,
    /// Key slots per token for the function experiment.
    pub slots: usize,
    /// Inverse temperature of the trained models' heads.
    pub model_beta: Option<f64>,
    pub train_size: usize,
    pub test_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seeds: Vec<u64>,
    pub sigma: f64,
    pub ridge_lambda: f64,
    pub zero_prob: f64,
    /// Lasso penalty for fitting real-data prompt weights (summed objective).
    pub lasso_lambda: f64,
    /// Accuracy target of constructive experiments.
    pub eps: f64,
    /// Random instances per property / per sweep point.
    pub trials: usize,
    /// Multiplier on the planned temperature (below 1 is a negative control).
    pub beta_scale: f64,
    pub data_path: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Desk-scale defaults for `kind`.
    pub fn desk(kind: ExperimentKind) -> Self {
        let base = Self {
            experiment: kind,
            n: 8,
            d: 8,
            d_h: 4,
            hidden: 16,
            heads: vec![1],
            slots: 8,
            model_beta: None,
            train_size: 5000,
            test_size: 1000,
            epochs: 50,
            lr: 1e-3,
            batch: 32,
            seeds: (0..5).collect(),
            sigma: 0.1,
            ridge_lambda: 5.0,
            zero_prob: 0.5,
            lasso_lambda: 1.0,
            eps: 0.05,
            trials: 1000,
            beta_scale: 1.0,
            data_path: None,
        };
        match kind {
            ExperimentKind::SimF => Self {
                model_beta: Some(0.1),
                ..base
            },
            ExperimentKind::SimAttentionHeads => Self {
                d: 4,
                heads: vec![1, 2, 4, 6, 8, 12],
                epochs: 20,
                ..base
            },
            ExperimentKind::FrozenVsBaseline => Self {
                d: 4,
                heads: vec![4],
                epochs: 20,
                seeds: (0..3).collect(),
                ..base
            },
            ExperimentKind::Ames => Self {
                heads: vec![8],
                train_size: 1000,
                test_size: 200,
                epochs: 20,
                ..base
            },
            ExperimentKind::VerifyLemmas => Self {
                n: 8,
                d: 3,
                seeds: vec![0],
                ..base
            },
            ExperimentKind::ConstructSweep => Self {
                n: 6,
                d: 3,
                heads: vec![1, 2, 4, 6, 8, 12],
                trials: 50,
                seeds: vec![0],
                ..base
            },
        }
    }

    /// Parse a JSON config; absent fields take the desk defaults of its
    /// `experiment` (or of `fallback` when the tag is absent).
    pub fn from_json(text: &str, fallback: ExperimentKind) -> Result<Self> {
        let user: Value = serde_json::from_str(text)?;
        let obj = user
            .as_object()
            .ok_or_else(|| Error::Parse("config must be a JSON object".into()))?;
        let kind = match obj.get("experiment") {
            Some(v) => serde_json::from_value(v.clone())?,
            None => fallback,
        };
        let mut merged = serde_json::to_value(Self::desk(kind))?;
        let target = merged.as_object_mut().expect("config serialises to an object");
        for (k, v) in obj {
            if !target.contains_key(k) {
                return Err(Error::Parse(format!("unknown config field {k:?}")));
            }
            target.insert(k.clone(), v.clone());
        }
        let cfg: Self = serde_json::from_value(merged)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Domain(format!("invalid config: {m}")));
        if self.n == 0 || self.d == 0 || self.d_h == 0 || self.hidden == 0 || self.slots == 0 {
            return bad("dimensions must be positive");
        }
        if self.heads.is_empty() || self.heads.contains(&0) {
            return bad("heads must be a nonempty list of positive counts");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if self.batch == 0 || !(self.lr >= 0.0) || !(self.eps > 0.0) || !(self.beta_scale > 0.0) {
            return bad("batch, lr, eps and beta_scale must be positive");
        }
        Ok(())
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch: self.batch,
            epochs: self.epochs,
            seed,
        }
    }

    fn task_params(&self) -> TaskParams {
        TaskParams {
            n: self.n,
            d: self.d,
            sigma: self.sigma,
            ridge_lambda: self.ridge_lambda,
            zero_prob: self.zero_prob,
        }
    }
}

/// Published value a metric can be read against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub mean: f64,
    pub std: Option<f64>,
}

/// One metric over seeds; `mean`/`std` are always recomputed from `values`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (0 for a single value).
    pub std: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<Reference>,
}

impl Metric {
    pub fn new(name: impl Into<String>, seeds: Vec<u64>, values: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&values);
        Self {
            name: name.into(),
            seeds,
            values,
            mean,
            std,
            reference: None,
        }
    }

    pub fn with_reference(mut self, mean: f64, std: Option<f64>) -> Self {
        self.reference = Some(Reference { mean, std });
        self
    }

    /// Recompute the summary from the raw values (used when loading records).
    pub fn recompute(&mut self) {
        let (m, s) = mean_std(&self.values);
        self.mean = m;
        self.std = s;
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let k = values.len();
    if k == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    if k == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1) as f64;
    (mean, var.sqrt())
}

/// Plot-ready `(x, y, yerr)` series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub experiment: ExperimentKind,
    pub config: ExperimentConfig,
    pub metrics: Vec<Metric>,
    /// Experiment-specific rows (one JSON object per row).
    pub table: Vec<Value>,
    pub series: Vec<Series>,
    #[serde(default)]
    pub histories: BTreeMap<String, LossHistory>,
    /// Notes such as excluded seeds or skipped parts.
    pub flags: Vec<String>,
    /// Outcome of the experiment's own pass condition, when it has one.
    pub passed: Option<bool>,
    pub runtime_secs: f64,
    pub library_version: String,
    pub rng: String,
}

impl ResultRecord {
    fn new(config: &ExperimentConfig) -> Self {
        Self {
            experiment: config.experiment,
            config: config.clone(),
            metrics: Vec::new(),
            table: Vec::new(),
            series: Vec::new(),
            histories: BTreeMap::new(),
            flags: Vec::new(),
            passed: None,
            runtime_secs: 0.0,
            library_version: env!("CARGO_PKG_VERSION").to_string(),
            rng: RNG_IDENTITY.to_string(),
        }
    }

    pub fn metric(&self, name: &str) -> Option<&Metric> {
        self.metrics.iter().find(|m| m.name == name)
    }

    /// Metrics as CSV: `name,mean,std,count,values` (values `;`-separated).
    pub fn metrics_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["name", "mean", "std", "count", "values", "reference_mean", "reference_std"])?;
        for m in &self.metrics {
            let values: Vec<String> = m.values.iter().map(|v| format!("{v:e}")).collect();
            w.write_record([
                m.name.clone(),
                format!("{:e}", m.mean),
                format!("{:e}", m.std),
                m.values.len().to_string(),
                values.join(";"),
                m.reference.as_ref().map(|r| r.mean.to_string()).unwrap_or_default(),
                m.reference.as_ref().and_then(|r| r.std).map(|s| s.to_string()).unwrap_or_default(),
            ])?;
        }
        csv_string(w)
    }
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

/// Write `text` to `path` atomically (temporary file then rename).
fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Write `<tag>.json`, `<tag>_metrics.csv`, one `<tag>_<series>.csv` per
/// series and `<tag>_history_<run>.csv` per loss history. Returns the paths.
pub fn write_outputs(record: &ResultRecord, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let tag = record.experiment.tag();
    let mut written = Vec::new();
    let json_path = dir.join(format!("{tag}.json"));
    write_atomic(&json_path, &serde_json::to_string_pretty(record)?)?;
    written.push(json_path);
    let csv_path = dir.join(format!("{tag}_metrics.csv"));
    write_atomic(&csv_path, &record.metrics_csv()?)?;
    written.push(csv_path);
    for s in &record.series {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["x", "y", "yerr"])?;
        for (x, y, e) in &s.points {
            w.write_record([x.to_string(), format!("{y:e}"), format!("{e:e}")])?;
        }
        let p = dir.join(format!("{tag}_{}.csv", s.name));
        write_atomic(&p, &csv_string(w)?)?;
        written.push(p);
    }
    for (name, h) in &record.histories {
        let p = dir.join(format!("{tag}_history_{name}.csv"));
        write_atomic(&p, &h.to_csv()?)?;
        written.push(p);
    }
    Ok(written)
}

/// Dispatch on the config's experiment tag.
pub fn run(config: &ExperimentConfig) -> Result<ResultRecord> {
    config.validate()?;
    match config.experiment {
        ExperimentKind::SimF => run_sim_f(config),
        ExperimentKind::SimAttentionHeads => run_heads(config),
        ExperimentKind::FrozenVsBaseline => run_frozen_vs_baseline(config),
        ExperimentKind::Ames => {
            let path = config
                .data_path
                .as_ref()
                .ok_or_else(|| Error::Domain("the ames experiment needs data_path".into()))?;
            run_ames(config, path)
        }
        ExperimentKind::VerifyLemmas => verify_lemmas(config),
        ExperimentKind::ConstructSweep => run_construct_sweep(config),
    }
}

/// Alias matching the harness vocabulary.
pub fn run_trained_experiments(config: &ExperimentConfig) -> Result<ResultRecord> {
    run(config)
}

fn init_model(arch: Architecture, seed: u64, stream: u64) -> Result<TrainableModel> {
    TrainableModel::init(arch, &mut Rng::substream(seed, 0x1_0000 + stream))
}

fn split_dataset(data: Dataset, train: usize) -> (Dataset, Dataset) {
    let Dataset { mut inputs, mut targets } = data;
    let test = Dataset {
        inputs: inputs.split_off(train),
        targets: targets.split_off(train),
    };
    (Dataset { inputs, targets }, test)
}

/// Trained single-head attention on `tanh(wᵀx − y)x`.
pub fn run_sim_f(cfg: &ExperimentConfig) -> Result<ResultRecord> {
    let start = Instant::now();
    let mut rec = ResultRecord::new(cfg);
    let (n, d) = (cfg.n, cfg.d);
    let arch = Architecture {
        input_dim: 2 * d + 1,
        tokens: n,
        front: FrontEnd::Slots {
            slots: cfg.slots,
            emb: cfg.hidden,
            local: true,
            key_rows: Some(d + 1),
        },
        heads: 1,
        head_dim: cfg.hidden,
        output_dim: d,
        beta: cfg.model_beta.unwrap_or(1.0),
    };
    let (mut seeds, mut test_mse, mut train_mse) = (Vec::new(), Vec::new(), Vec::new());
    for &seed in &cfg.seeds {
        let samples = gen_sim_f_data(n, d, cfg.train_size + cfg.test_size, seed)?;
        let (tr, te) = split_dataset(sim_f_dataset(&samples)?, cfg.train_size);
        let model = init_model(arch.clone(), seed, 0)?;
        match train(model, &tr, Some(&te), &cfg.train_config(seed)) {
            Ok(out) => {
                let last = out.history.last().expect("history has the initial record");
                seeds.push(seed);
                train_mse.push(last.train_mse);
                test_mse.push(last.test_mse.unwrap_or(f64::NAN));
                rec.table.push(json!({
                    "seed": seed,
                    "train_mse": last.train_mse,
                    "test_mse": last.test_mse,
                    "params": out.model.param_count(),
                    "checksum": out.model.checksum(),
                }));
                rec.histories.insert(format!("seed{seed}"), out.history);
            }
            Err(Error::Diverged { epoch }) => rec.flags.push(format!("seed {seed} diverged at epoch {epoch}; excluded")),
            Err(e) => return Err(e),
        }
    }
    rec.metrics.push(Metric::new("test_mse", seeds.clone(), test_mse).with_reference(0.0003, None));
    rec.metrics.push(Metric::new("train_mse", seeds, train_mse).with_reference(0.0028, None));
    rec.runtime_secs = start.elapsed().as_secs_f64();
    Ok(rec)
}

/// Published emulation MSE (mean, std) per head count.
pub const PUBLISHED_HEAD_MSE: [(usize, f64, f64); 6] = [
    (1, 3.469, 0.381),
    (2, 2.802, 0.413),
    (4, 1.222, 0.603),
    (6, 1.012, 0.204),
    (8, 0.793, 0.127),
    (12, 0.686, 0.171),
];

/// Output of one trained K/Q/V emulation cell.
#[derive(Clone, Debug)]
pub struct HeadCell {
    pub emulation_mse: f64,
    pub group_mse: [f64; 3],
}

/// Train the three projection sub-models with `heads` heads and measure the
/// assembled head `V' softmax(K'ᵀQ')` against the exact output.
pub fn head_cell(cfg: &ExperimentConfig, heads: usize, seed: u64) -> Result<HeadCell> {
    let samples = gen_head_data(cfg.n, cfg.d, cfg.d_h, cfg.train_size + cfg.test_size, seed, 0)?;
    let (train_s, test_s) = samples.split_at(cfg.train_size);
    let mut models = Vec::with_capacity(3);
    let mut group_mse = [0.0; 3];
    for (g, group) in Group::ALL.into_iter().enumerate() {
        let out_rows = if group == Group::Value { cfg.d } else { cfg.d_h };
        let arch = Architecture {
            input_dim: 2 * cfg.d + cfg.n,
            tokens: cfg.n,
            front: FrontEnd::Linear { emb: cfg.hidden },
            heads,
            head_dim: cfg.hidden,
            output_dim: out_rows,
            beta: cfg.model_beta.unwrap_or(1.0 / (cfg.hidden as f64).sqrt()),
        };
        let tr = head_group_dataset(train_s, group)?;
        let te = head_group_dataset(test_s, group)?;
        let model = init_model(arch, seed, 0x100 * heads as u64 + g as u64)?;
        let out = train(model, &tr, None, &cfg.train_config(seed.wrapping_add(g as u64 * 0x9e37)))?;
        let frozen = freeze(out.model);
        group_mse[g] = frozen.mse(&te)?;
        models.push(frozen);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for s in test_s {
        let y = s.output()?;
        let proj = |g: usize, w: &Matrix| -> Result<Matrix> { models[g].evaluate(&head_group_input(&s.x, w)?) };
        let k = proj(0, &s.w_k)?;
        let q = proj(1, &s.w_q)?;
        let v = proj(2, &s.w_v)?;
        let y_hat = attend(&k, &q, &v, 1.0, None)?;
        total += y.data().iter().zip(y_hat.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        count += y.data().len();
    }
    Ok(HeadCell {
        emulation_mse: total / count as f64,
        group_mse,
    })
}

/// Emulation MSE of trained multi-head projections per head count.
pub fn run_heads(cfg: &ExperimentConfig) -> Result<ResultRecord> {
    let start = Instant::now();
    let mut rec = ResultRecord::new(cfg);
    let mut points = Vec::new();
    for &h in &cfg.heads {
        let (mut seeds, mut emu) = (Vec::new(), Vec::new());
        let mut groups: [Vec<f64>; 3] = Default::default();
        for &seed in &cfg.seeds {
            match head_cell(cfg, h, seed) {
                Ok(cell) => {
                    seeds.push(seed);
                    emu.push(cell.emulation_mse);
                    for g in 0..3 {
                        groups[g].push(cell.group_mse[g]);
                    }
                    rec.table.push(json!({
                        "heads": h,
                        "seed": seed,
                        "emulation_mse": cell.emulation_mse,
                        "k_mse": cell.group_mse[0],
                        "q_mse": cell.group_mse[1],
                        "v_mse": cell.group_mse[2],
                    }));
                }
                Err(Error::Diverged { epoch }) => {
                    rec.flags.push(format!("heads {h} seed {seed} diverged at epoch {epoch}; excluded"))
                }
                Err(e) => return Err(e),
            }
        }
        let mut m = Metric::new(format!("emulation_mse_h{h}"), seeds.clone(), emu);
        if let Some(&(_, pm, ps)) = PUBLISHED_HEAD_MSE.iter().find(|r| r.0 == h) {
            m = m.with_reference(pm, Some(ps));
        }
        points.push((h as f64, m.mean, m.std));
        rec.metrics.push(m);
        for (g, group) in Group::ALL.into_iter().enumerate() {
            rec.metrics.push(Metric::new(
                format!("{}_mse_h{h}", group.name().to_lowercase()),
                seeds.clone(),
                std::mem::take(&mut groups[g]),
            ));
        }
    }
    rec.series.push(Series {
        name: "emulation_mse_vs_heads".into(),
        points,
    });
    rec.runtime_secs = start.elapsed().as_secs_f64();
    Ok(rec)
}

/// Per-task MSE of a frozen model trained on the task mixture and of
/// baselines trained on one task each, all with the same architecture.
pub fn frozen_vs_baseline_cell(
    arch: &Architecture,
    train_sets: &BTreeMap<Task, Dataset>,
    test_sets: &BTreeMap<Task, Dataset>,
    tc: &TrainConfig,
    seed: u64,
) -> Result<BTreeMap<Task, (f64, f64)>> {
    // Mixture of equal total size: every third sample from each task.
    let per_task = train_sets.values().map(Dataset::len).min().unwrap_or(0);
    let share = per_task.div_ceil(train_sets.len().max(1));
    let mut mixture = Dataset::default();
    for k in 0..share {
        for ds in train_sets.values() {
            mixture.inputs.push(ds.inputs[k].clone());
            mixture.targets.push(ds.targets[k].clone());
        }
    }
    let frozen = freeze(train(init_model(arch.clone(), seed, 0x200)?, &mixture, None, tc)?.model);
    let mut out = BTreeMap::new();
    for (&task, ds) in train_sets {
        let stream = 0x300 + task as u64;
        let baseline = train(init_model(arch.clone(), seed, stream)?, ds, None, tc)?.model;
        let test = &test_sets[&task];
        out.insert(task, (frozen.mse(test)?, baseline.mse(test)?));
    }
    Ok(out)
}

/// Published frozen / baseline MSE per task (synthetic data).
pub fn published_synthetic(task: Task) -> ((f64, f64), (f64, f64)) {
    match task {
        Task::Lasso => ((0.059, 0.001), (0.068, 0.015)),
        Task::Ridge => ((0.071, 0.0002), (0.004, 0.0003)),
        Task::Linear => ((0.120, 0.003), (0.147, 0.067)),
    }
}

/// Published frozen / baseline MSE per task (Ames).
pub fn published_ames(task: Task) -> (f64, f64) {
    match task {
        Task::Lasso => (0.0322, 0.0354),
        Task::Ridge => (0.0252, 0.0132),
        Task::Linear => (0.0250, 0.0288),
    }
}

fn summarise_frozen(
    rec: &mut ResultRecord,
    cells: &[(u64, BTreeMap<Task, (f64, f64)>)],
    reference: impl Fn(Task) -> ((f64, Option<f64>), (f64, Option<f64>)),
) {
    let seeds: Vec<u64> = cells.iter().map(|c| c.0).collect();
    let mut all_within = !cells.is_empty();
    for task in Task::ALL {
        let frozen: Vec<f64> = cells.iter().map(|c| c.1[&task].0).collect();
        let base: Vec<f64> = cells.iter().map(|c| c.1[&task].1).collect();
        let ratio: Vec<f64> = frozen.iter().zip(&base).map(|(f, b)| f / b).collect();
        let ((fm, fs), (bm, bs)) = reference(task);
        let fmet = Metric::new(format!("frozen_{}", task.name()), seeds.clone(), frozen).with_reference(fm, fs);
        let bmet = Metric::new(format!("baseline_{}", task.name()), seeds.clone(), base).with_reference(bm, bs);
        all_within &= fmet.mean <= 2.0 * bmet.mean;
        rec.metrics.push(fmet);
        rec.metrics.push(bmet);
        rec.metrics.push(Metric::new(format!("ratio_{}", task.name()), seeds.clone(), ratio));
    }
    for (seed, cell) in cells {
        for (task, (f, b)) in cell {
            rec.table.push(json!({"seed": seed, "task": task.name(), "frozen_mse": f, "baseline_mse": b}));
        }
    }
    rec.passed = Some(all_within);
}

fn statistical_arch(cfg: &ExperimentConfig, input_dim: usize) -> Architecture {
    Architecture {
        input_dim,
        tokens: cfg.n,
        front: FrontEnd::Linear { emb: cfg.hidden },
        heads: cfg.heads[0],
        head_dim: cfg.hidden,
        output_dim: 1,
        beta: cfg.model_beta.unwrap_or(1.0 / (cfg.hidden as f64).sqrt()),
    }
}

/// Frozen mixture-trained model vs per-task baselines on synthetic prompts.
pub fn run_frozen_vs_baseline(cfg: &ExperimentConfig) -> Result<ResultRecord> {
    let start = Instant::now();
    let mut rec = ResultRecord::new(cfg);
    let arch = statistical_arch(cfg, 2 * cfg.d + cfg.n);
    let params = cfg.task_params();
    let mut cells = Vec::new();
    for &seed in &cfg.seeds {
        let mut train_sets = BTreeMap::new();
        let mut test_sets = BTreeMap::new();
        for task in Task::ALL {
            let samples = gen_task_data(task, &params, cfg.train_size + cfg.test_size, seed)?;
            let (tr, te) = split_dataset(task_dataset(&samples)?, cfg.train_size);
            train_sets.insert(task, tr);
            test_sets.insert(task, te);
        }
        match frozen_vs_baseline_cell(&arch, &train_sets, &test_sets, &cfg.train_config(seed), seed) {
            Ok(cell) => cells.push((seed, cell)),
            Err(Error::Diverged { epoch }) => rec.flags.push(format!("seed {seed} diverged at epoch {epoch}; excluded")),
            Err(e) => return Err(e),
        }
    }
    summarise_frozen(&mut rec, &cells, |t| {
        let ((fm, fs), (bm, bs)) = published_synthetic(t);
        ((fm, Some(fs)), (bm, Some(bs)))
    });
    rec.runtime_secs = start.elapsed().as_secs_f64();
    Ok(rec)
}

/// Weights fitted on the training rows (target centred, no intercept).
pub fn fit_ames_weights(data: &AmesData, rows: &[usize], task: Task, cfg: &ExperimentConfig) -> Result<Vec<f64>> {
    let mean = rows.iter().map(|&r| data.target[r]).sum::<f64>() / rows.len() as f64;
    let pairs: Vec<Pair> = rows
        .iter()
        .map(|&r| (data.features.row(r).to_vec(), data.target[r] - mean))
        .collect();
    match task {
        Task::Ridge => ridge_regression(&pairs, cfg.ridge_lambda),
        // One-hot blocks are collinear, so the least-squares fit is taken as
        // the limit of a vanishing ridge penalty.
        Task::Linear => ridge_regression(&pairs, 1e-8 * rows.len() as f64),
        Task::Lasso => lasso_oracle(&pairs, cfg.lasso_lambda),
    }
}

fn ames_prompts(data: &AmesData, rows: &[usize], w: &[f64], count: usize, n: usize, rng: &mut Rng) -> Result<Dataset> {
    let mut out = Dataset::default();
    for _ in 0..count {
        let picks: Vec<usize> = (0..n).map(|_| rows[rng.index(rows.len())]).collect();
        let x = Matrix::from_fn(data.features.cols(), n, |r, c| data.features.get(picks[c], r));
        let (z, t) = data::prompt_tokens(&x, w)?;
        out.inputs.push(z);
        out.targets.push(t);
    }
    Ok(out)
}

/// Real-data version of the frozen-vs-baseline comparison: weights fitted
/// on the 80% split, prompts of `n` rows drawn from each split.
pub fn run_ames(cfg: &ExperimentConfig, path: &Path) -> Result<ResultRecord> {
    let start = Instant::now();
    let mut rec = ResultRecord::new(cfg);
    let data = ingest_ames(path)?;
    rec.flags.extend(data.warnings.iter().cloned());
    rec.table.push(json!({
        "rows": data.features.rows(),
        "features": data.features.cols(),
        "numeric_columns": data.numeric_columns,
        "categorical_columns": data.categorical_columns,
        "imputed_entries": data.imputed_entries,
    }));
    let p = data.features.cols();
    let arch = statistical_arch(cfg, 2 * p + cfg.n);
    let mut cells = Vec::new();
    for &seed in &cfg.seeds {
        let (train_rows, test_rows) = train_test_split(data.features.rows(), 0.8, seed);
        let mut rng = Rng::substream(seed, 0xa3e5);
        let mut train_sets = BTreeMap::new();
        let mut test_sets = BTreeMap::new();
        for task in Task::ALL {
            let w = fit_ames_weights(&data, &train_rows, task, cfg)?;
            train_sets.insert(task, ames_prompts(&data, &train_rows, &w, cfg.train_size, cfg.n, &mut rng)?);
            test_sets.insert(task, ames_prompts(&data, &test_rows, &w, cfg.test_size, cfg.n, &mut rng)?);
        }
        match frozen_vs_baseline_cell(&arch, &train_sets, &test_sets, &cfg.train_config(seed), seed) {
            Ok(cell) => cells.push((seed, cell)),
            Err(Error::Diverged { epoch }) => rec.flags.push(format!("seed {seed} diverged at epoch {epoch}; excluded")),
            Err(e) => return Err(e),
        }
    }
    summarise_frozen(&mut rec, &cells, |t| {
        let (f, b) = published_ames(t);
        ((f, None), (b, None))
    });
    rec.runtime_secs = start.elapsed().as_secs_f64();
    Ok(rec)
}

/// One row of the constructive head-budget sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub heads: usize,
    pub measured: f64,
    pub bound: f64,
    pub interpolation: f64,
    /// `max(|a|,|b|)·eps0`, held fixed across the sweep.
    pub leakage: f64,
    pub beta: f64,
    pub within_bound: bool,
}

/// Truncated-linear approximators over a range of head budgets on the same
/// random instances: the leakage term is held at `eps/2` while the
/// interpolation term `(b − a)/((n − 2)H)` scales as `1/H`.
pub fn run_construct_sweep(cfg: &ExperimentConfig) -> Result<ResultRecord> {
    let start = Instant::now();
    let mut rec = ResultRecord::new(cfg);
    let (n, d) = (cfg.n, cfg.d);
    let (a, b) = (-1.0, 1.0);
    let mut rng = Rng::substream(cfg.seeds[0], 0xc0);
    // Coefficients in [-1/d, 1/d] and inputs in [-1, 1] keep w_sᵀx in [a, b].
    let instances: Vec<(Matrix, Matrix)> = (0..cfg.trials)
        .map(|_| {
            let w = Matrix::from_fn(d, 1, |_, _| rng.uniform_in(-1.0, 1.0) / d as f64);
            let x = Matrix::from_fn(d, n, |_, _| rng.uniform_in(-1.0, 1.0));
            (w, x)
        })
        .collect();
    let mut rows = Vec::new();
    for &h in &cfg.heads {
        let plan = match plan_with_heads(a, b, n, h, cfg.eps / 2.0) {
            Ok(p) => p,
            Err(e) => {
                rec.flags.push(format!("heads {h}: {e}"));
                continue;
            }
        };
        let mut measured = 0.0f64;
        for (w, x) in &instances {
            let approx = build_truncated_linear(w, &plan.grid, n, plan.beta, 0, 1)?;
            measured = measured.max(sup_norm_diff(&approx.forward(x)?, &approx.reference(x)?)?);
        }
        let m_v = a.abs().max(b.abs());
        let row = SweepRow {
            heads: h,
            measured,
            bound: plan.bound,
            interpolation: plan.interpolation,
            leakage: m_v * plan.eps0,
            beta: plan.beta,
            within_bound: measured <= plan.bound,
        };
        rec.table.push(serde_json::to_value(&row)?);
        rows.push(row);
    }
    let seeds = vec![cfg.seeds[0]];
    for r in &rows {
        rec.metrics.push(Metric::new(format!("measured_h{}", r.heads), seeds.clone(), vec![r.measured]));
        rec.metrics.push(Metric::new(format!("bound_h{}", r.heads), seeds.clone(), vec![r.bound]));
    }
    rec.series.push(Series {
        name: "measured_vs_heads".into(),
        points: rows.iter().map(|r| (r.heads as f64, r.measured, 0.0)).collect(),
    });
    rec.series.push(Series {
        name: "bound_vs_heads".into(),
        points: rows.iter().map(|r| (r.heads as f64, r.bound, 0.0)).collect(),
    });
    rec.passed = Some(!rows.is_empty() && rows.iter().all(|r| r.within_bound));
    rec.runtime_secs = start.elapsed().as_secs_f64();
    Ok(rec)
}

/// Outcome of one batch property.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyOutcome {
    pub name: String,
    pub trials: usize,
    pub violations: usize,
    pub worst_error: f64,
    /// First violating input, when there is one.
    pub counterexample: Option<Value>,
    pub passed: bool,
}

/// Random score vector of length `n` with entries in `[-2, 2]`; with
/// `tie`, the top entry is duplicated at a random position.
fn random_scores(rng: &mut Rng, n: usize, tie: bool) -> Vec<f64> {
    let mut x: Vec<f64> = (0..n).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
    if tie {
        let (imax, &m) = x
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("n >= 1");
        let mut j = rng.index(n);
        if j == imax {
            j = (j + 1) % n;
        }
        x[j] = m;
    }
    x
}

fn sorted_desc(x: &[f64]) -> Vec<(usize, f64)> {
    let mut s: Vec<(usize, f64)> = x.iter().copied().enumerate().collect();
    s.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    s
}

fn softmax_vec(x: &[f64], beta: f64) -> Result<Vec<f64>> {
    Ok(softmax_cols(&Matrix::column(x), beta)?.into_data())
}

/// Hardmax property: at the planned temperature (times `beta_scale`),
/// `‖softmax_β(x) − e_max‖∞ ≤ eps` (unique maximum) or
/// `‖softmax_β(x) − top-two mixture‖∞ ≤ eps`.
pub fn hardmax_property(case: HardmaxCase, n: usize, eps: f64, beta_scale: f64, trials: usize, seed: u64) -> Result<PropertyOutcome> {
    let mut rng = Rng::substream(seed, 0x4a + case as u64);
    let mut out = PropertyOutcome {
        name: format!("hardmax_{case:?}"),
        trials: 0,
        violations: 0,
        worst_error: 0.0,
        counterexample: None,
        passed: true,
    };
    while out.trials < trials {
        let tie = case == HardmaxCase::TwoLargest && rng.bernoulli(0.5);
        let x = random_scores(&mut rng, n, tie);
        let s = sorted_desc(&x);
        let gap = match case {
            HardmaxCase::UniqueMax => s[0].1 - s[1].1,
            HardmaxCase::TwoLargest => s[0].1 - s[2].1,
        };
        if !(gap > 1e-6) {
            continue;
        }
        let plan = plan_hardmax_beta(n, gap, eps, case)?;
        let beta = plan.beta_min * beta_scale;
        let p = softmax_vec(&x, beta)?;
        let mut target = vec![0.0; n];
        match case {
            HardmaxCase::UniqueMax => target[s[0].0] = 1.0,
            HardmaxCase::TwoLargest => {
                let (i, j) = (s[0].0, s[1].0);
                let e = (beta * (s[1].1 - s[0].1)).exp();
                target[i] = 1.0 / (1.0 + e);
                target[j] = e / (1.0 + e);
            }
        }
        let err = p.iter().zip(&target).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        out.worst_error = out.worst_error.max(err);
        if err > eps {
            out.violations += 1;
            if out.counterexample.is_none() {
                out.counterexample = Some(json!({"x": x, "beta": beta, "gap": gap, "error": err}));
            }
        }
        out.trials += 1;
    }
    out.passed = out.violations == 0;
    Ok(out)
}

/// Truncated-linear bound on random `(w_s, X)`: every entry within the
/// certified bound of `Range_[a,b](w_sᵀx_i)`.
pub fn truncated_linear_property(n: usize, d: usize, eps: f64, trials: usize, seed: u64) -> Result<PropertyOutcome> {
    let mut rng = Rng::substream(seed, 0x7b);
    let mut out = PropertyOutcome {
        name: "truncated_linear_bound".into(),
        trials,
        violations: 0,
        worst_error: 0.0,
        counterexample: None,
        passed: true,
    };
    let (a, b) = (-1.0, 1.0);
    let plan = plan_truncated_linear(a, b, n, eps)?;
    for _ in 0..trials {
        // Coefficients reach outside the range so clamping is exercised.
        let w = Matrix::from_fn(d, 1, |_, _| rng.uniform_in(-1.0, 1.0));
        let x = Matrix::from_fn(d, n, |_, _| rng.uniform_in(-1.0, 1.0));
        let approx = build_truncated_linear(&w, &plan.grid, n, plan.beta, 0, 1)?;
        let err = sup_norm_diff(&approx.forward(&x)?, &approx.reference(&x)?)?;
        out.worst_error = out.worst_error.max(err);
        if err > approx.bound() {
            out.violations += 1;
            if out.counterexample.is_none() {
                out.counterexample = Some(json!({"w": w.data(), "x": x.to_rows(), "error": err, "bound": approx.bound()}));
            }
        }
    }
    out.passed = out.violations == 0;
    Ok(out)
}

/// Batch runs of the hardmax and truncated-linear properties.
pub fn verify_lemmas(cfg: &ExperimentConfig) -> Result<ResultRecord> {
    let start = Instant::now();
    let mut rec = ResultRecord::new(cfg);
    let seed = cfg.seeds[0];
    let outcomes = vec![
        hardmax_property(HardmaxCase::UniqueMax, cfg.n, cfg.eps, cfg.beta_scale, cfg.trials, seed)?,
        hardmax_property(HardmaxCase::TwoLargest, cfg.n, cfg.eps, cfg.beta_scale, cfg.trials, seed)?,
        truncated_linear_property(cfg.n, cfg.d, cfg.eps, cfg.trials.min(500), seed)?,
    ];
    for o in &outcomes {
        rec.metrics.push(Metric::new(format!("{}_violations", o.name), vec![seed], vec![o.violations as f64]));
        rec.metrics.push(Metric::new(format!("{}_worst_error", o.name), vec![seed], vec![o.worst_error]));
        rec.table.push(serde_json::to_value(o)?);
    }
    rec.passed = Some(outcomes.iter().all(|o| o.passed));
    rec.runtime_secs = start.elapsed().as_secs_f64();
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_from_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn config_merges_over_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"experiment":"construct_sweep","trials":3}"#, ExperimentKind::SimF).unwrap();
        assert_eq!(cfg.trials, 3);
        assert_eq!(cfg.heads, vec![1, 2, 4, 6, 8, 12]);
        assert!(ExperimentConfig::from_json(r#"{"bogus":1}"#, ExperimentKind::SimF).is_err());
    }

    #[test]
    fn undersized_beta_is_caught() {
        let o = hardmax_property(HardmaxCase::UniqueMax, 6, 0.05, 0.25, 200, 0).unwrap();
        assert!(!o.passed);
        assert!(o.counterexample.is_some());
    }

    #[test]
    fn small_sweep_is_sound() {
        let cfg = ExperimentConfig {
            trials: 4,
            heads: vec![1, 2, 4],
            ..ExperimentConfig::desk(ExperimentKind::ConstructSweep)
        };
        let rec = run_construct_sweep(&cfg).unwrap();
        assert_eq!(rec.passed, Some(true));
        assert_eq!(rec.table.len(), 3);
    }
}
