//! Training of single-layer multi-head softmax attention with linear
//! connections, by hand-written reverse-mode differentiation and Adam.
//!
//! A sample is a token matrix `X` (features × n) with a target `T`
//! (outputs × n). The model is
//!
//! ```text
//! (Z_k, Z_q) = front(X)                 input linear connection
//! O_h        = W_V,h Z_k · softmax_β((W_K,h Z_k)ᵀ W_Q,h Z_q)   per head
//! Y          = W_out [O_1; …; O_H] + b_out 1ᵀ                    output linear
//! ```
//!
//! and the loss is the mean squared error over every output entry. The
//! [`FrontEnd::Slots`] input connection expands each token into several key
//! tokens `r1_j A1 x_i + r2_j A2 x_i + B_j + P_k e_i`, the learnable analogue
//! of the interpolation-grid expansion used by the exact constructions.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::attention::{HeadFile, LayerFile};
use crate::error::{Error, Result};
use crate::linalg::{feed_hasher, hex, matmul, softmax_cols, Matrix};
use crate::rng::Rng;

/// How tokens are mapped to the key/value and query token sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FrontEnd {
    /// Self-attention directly on the input tokens.
    Identity,
    /// Self-attention on `A X + b`.
    Linear { emb: usize },
    /// `slots` key tokens per input token, queries `A_q X + b_q + P_q`.
    /// With `local`, query `c` attends only to the slots of token `c`
    /// (the block selection the exact construction obtains from a large
    /// positional score); otherwise it attends to every slot.
    /// With `key_rows = Some(k)`, keys and values read only feature rows
    /// `0..k` and queries only rows `k..`; otherwise both read every row.
    Slots {
        slots: usize,
        emb: usize,
        #[serde(default)]
        local: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        key_rows: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// Feature rows per input token.
    pub input_dim: usize,
    /// Tokens per sample.
    pub tokens: usize,
    pub front: FrontEnd,
    pub heads: usize,
    pub head_dim: usize,
    pub output_dim: usize,
    /// Fixed inverse temperature of every head.
    pub beta: f64,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.input_dim, self.tokens, self.heads, self.head_dim, self.output_dim];
        if positive.contains(&0) {
            return Err(Error::Domain(format!("architecture dimensions must be positive: {self:?}")));
        }
        match self.front {
            FrontEnd::Linear { emb: 0 } | FrontEnd::Slots { emb: 0, .. } | FrontEnd::Slots { slots: 0, .. } => {
                return Err(Error::Domain("front-end sizes must be positive".into()));
            }
            _ => {}
        }
        if let FrontEnd::Slots { key_rows: Some(k), .. } = self.front {
            if k == 0 || k >= self.input_dim {
                return Err(Error::Domain(format!(
                    "key_rows {k} must split the {} input rows",
                    self.input_dim
                )));
            }
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Domain(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }

    /// Width of the tokens the heads see.
    pub fn embed_dim(&self) -> usize {
        match self.front {
            FrontEnd::Identity => self.input_dim,
            FrontEnd::Linear { emb } | FrontEnd::Slots { emb, .. } => emb,
        }
    }

    fn front_param_count(&self) -> usize {
        match self.front {
            FrontEnd::Identity => 0,
            FrontEnd::Linear { .. } => 2,
            FrontEnd::Slots { .. } => 9,
        }
    }

    /// Feature rows seen by the key side and by the query side.
    fn slot_split(&self) -> (usize, usize) {
        match self.front {
            FrontEnd::Slots { key_rows: Some(k), .. } => (k, self.input_dim - k),
            _ => (self.input_dim, self.input_dim),
        }
    }

    /// Key-side and query-side inputs of the slot front end.
    fn split_input(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        match self.front {
            FrontEnd::Slots { key_rows: Some(k), .. } => Ok((x.row_block(0, k)?, x.row_block(k, x.rows())?)),
            _ => Ok((x.clone(), x.clone())),
        }
    }

    /// Registry of `(name, shape)` in the canonical order.
    pub fn param_shapes(&self) -> Vec<(String, (usize, usize))> {
        let (f, n, e) = (self.input_dim, self.tokens, self.embed_dim());
        let mut out: Vec<(String, (usize, usize))> = Vec::new();
        match self.front {
            FrontEnd::Identity => {}
            FrontEnd::Linear { emb } => {
                out.push(("in.A".into(), (emb, f)));
                out.push(("in.b".into(), (emb, 1)));
            }
            FrontEnd::Slots { slots, emb, .. } => {
                let (kf, qf) = self.slot_split();
                out.push(("slot.A1".into(), (emb, kf)));
                out.push(("slot.A2".into(), (emb, kf)));
                out.push(("slot.r1".into(), (1, slots)));
                out.push(("slot.r2".into(), (1, slots)));
                out.push(("slot.B".into(), (emb, slots)));
                out.push(("slot.pos_k".into(), (emb, n)));
                out.push(("slot.A_q".into(), (emb, qf)));
                out.push(("slot.b_q".into(), (emb, 1)));
                out.push(("slot.pos_q".into(), (emb, n)));
            }
        }
        for h in 0..self.heads {
            for w in ["W_K", "W_Q", "W_V"] {
                out.push((format!("head{h}.{w}"), (self.head_dim, e)));
            }
        }
        out.push(("out.W".into(), (self.output_dim, self.heads * self.head_dim)));
        out.push(("out.b".into(), (self.output_dim, 1)));
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub value: Matrix,
}

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// A trainable attention layer with a deterministic parameter registry.
#[derive(Debug)]
pub struct TrainableModel {
    arch: Architecture,
    params: Vec<NamedParam>,
    /// Changes on every parameter write; caches remember the version they saw.
    version: u64,
}

impl Clone for TrainableModel {
    fn clone(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            params: self.params.clone(),
            version: fresh_version(),
        }
    }
}

impl PartialEq for TrainableModel {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.params == other.params
    }
}

impl TrainableModel {
    /// Random initialisation: weights `N(0, 1/fan_in)`, biases zero.
    pub fn init(arch: Architecture, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let params = arch
            .param_shapes()
            .into_iter()
            .map(|(name, (r, c))| {
                let value = if name.ends_with(".b") || name.ends_with(".b_q") {
                    Matrix::zeros(r, c)
                } else {
                    let std = 1.0 / (c as f64).sqrt();
                    Matrix::from_fn(r, c, |_, _| std * rng.normal())
                };
                NamedParam { name, value }
            })
            .collect();
        Ok(Self {
            arch,
            params,
            version: fresh_version(),
        })
    }

    /// Model from explicit parameters in registry order.
    pub fn from_params(arch: Architecture, params: Vec<NamedParam>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::Parse(format!(
                "expected {} parameters, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in shapes.iter().zip(&params) {
            if &p.name != name || p.value.shape() != *shape {
                return Err(Error::Parse(format!(
                    "parameter {} {:?} does not match registry entry {name} {shape:?}",
                    p.name,
                    p.value.shape()
                )));
            }
            if !p.value.is_finite() {
                return Err(Error::NonFinite("model parameter"));
            }
        }
        Ok(Self {
            arch,
            params,
            version: fresh_version(),
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.data().len()).sum()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Overwrite one parameter (shape-checked).
    pub fn set_param(&mut self, index: usize, value: Matrix) -> Result<()> {
        let len = self.params.len();
        let slot = self.params.get_mut(index).ok_or(Error::Index { index, len })?;
        if slot.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_param",
                left: slot.value.shape(),
                right: value.shape(),
            });
        }
        slot.value = value;
        self.version = fresh_version();
        Ok(())
    }

    /// Add `delta` to the flattened entry `entry` of parameter `index`.
    pub fn perturb(&mut self, index: usize, entry: usize, delta: f64) -> Result<()> {
        let len = self.params.len();
        let p = self.params.get_mut(index).ok_or(Error::Index { index, len })?;
        let n = p.value.data().len();
        let v = p.value.data_mut().get_mut(entry).ok_or(Error::Index { index: entry, len: n })?;
        *v += delta;
        self.version = fresh_version();
        Ok(())
    }

    /// SHA-256 over the registry (names, shapes and exact entries).
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            hasher.update(p.name.as_bytes());
            feed_hasher(&mut hasher, &p.value);
        }
        hex(&hasher.finalize())
    }

    fn p(&self, i: usize) -> &Matrix {
        &self.params[i].value
    }

    fn head_index(&self, h: usize) -> usize {
        self.arch.front_param_count() + 3 * h
    }

    fn out_index(&self) -> usize {
        self.arch.front_param_count() + 3 * self.arch.heads
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        let want = (self.arch.input_dim, self.arch.tokens);
        if x.shape() != want {
            return Err(Error::Shape {
                op: "model input",
                left: x.shape(),
                right: want,
            });
        }
        Ok(())
    }

    /// Key/value tokens and query tokens for one sample.
    fn front_forward(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        match self.arch.front {
            FrontEnd::Identity => Ok((x.clone(), x.clone())),
            FrontEnd::Linear { .. } => {
                let z = add_col_bias(&matmul(self.p(0), x)?, self.p(1));
                Ok((z.clone(), z))
            }
            FrontEnd::Slots { slots, emb, .. } => {
                let n = self.arch.tokens;
                let (xk, xq) = self.arch.split_input(x)?;
                let u1 = matmul(self.p(0), &xk)?;
                let u2 = matmul(self.p(1), &xk)?;
                let (r1, r2, b, pos_k) = (self.p(2), self.p(3), self.p(4), self.p(5));
                let mut zk = Matrix::zeros(emb, n * slots);
                for i in 0..n {
                    for j in 0..slots {
                        let t = i * slots + j;
                        let (a, c) = (r1.get(0, j), r2.get(0, j));
                        for r in 0..emb {
                            zk.set(r, t, a * u1.get(r, i) + c * u2.get(r, i) + b.get(r, j) + pos_k.get(r, i));
                        }
                    }
                }
                let mut zq = add_col_bias(&matmul(self.p(6), &xq)?, self.p(7));
                zq.add_scaled_in_place(self.p(8), 1.0)?;
                Ok((zk, zq))
            }
        }
    }

    fn sample_forward(&self, x: &Matrix) -> Result<SampleCache> {
        self.check_input(x)?;
        let (zk, zq) = self.front_forward(x)?;
        let (hd, n) = (self.arch.head_dim, self.arch.tokens);
        let mut cat = Matrix::zeros(self.arch.heads * hd, n);
        let mut heads = Vec::with_capacity(self.arch.heads);
        for h in 0..self.arch.heads {
            let base = self.head_index(h);
            let k = matmul(self.p(base), &zk)?;
            let q = matmul(self.p(base + 1), &zq)?;
            let v = matmul(self.p(base + 2), &zk)?;
            let s = matmul_tn(&k, &q)?;
            let p = match self.arch.front {
                FrontEnd::Slots { slots, local: true, .. } => local_softmax(&s, slots, self.arch.beta)?,
                _ => softmax_cols(&s, self.arch.beta)?,
            };
            let o = matmul(&v, &p)?;
            cat.set_block(h * hd, 0, &o)?;
            heads.push(HeadCache { k, q, v, p });
        }
        let oi = self.out_index();
        let y = add_col_bias(&matmul(self.p(oi), &cat)?, self.p(oi + 1));
        Ok(SampleCache { zk, zq, heads, cat, y })
    }

    /// Model output for one sample (outputs × n).
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.sample_forward(x)?.y)
    }

    /// Mean squared error over a dataset, evaluated in a fixed order.
    pub fn mse(&self, data: &Dataset) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for (x, t) in data.inputs.iter().zip(&data.targets) {
            let y = self.predict(x)?;
            check_target(&y, t)?;
            total += y.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            count += t.data().len();
        }
        if count == 0 {
            return Err(Error::Domain("empty dataset".into()));
        }
        Ok(total / count as f64)
    }

    /// Heads in the on-disk layer format (they act on the embedded tokens).
    pub fn to_layer_file(&self) -> LayerFile {
        let heads = (0..self.arch.heads)
            .map(|h| {
                let b = self.head_index(h);
                HeadFile {
                    w_k: self.p(b).clone(),
                    w_q: self.p(b + 1).clone(),
                    w_v: self.p(b + 2).clone(),
                    w_o: None,
                    beta: None,
                }
            })
            .collect();
        LayerFile {
            beta: self.arch.beta,
            heads,
            kind: Some("trained".into()),
        }
    }
}

/// Softmax of column `c` restricted to rows `c·slots .. (c+1)·slots`;
/// every other entry is exactly zero.
fn local_softmax(s: &Matrix, slots: usize, beta: f64) -> Result<Matrix> {
    if !s.is_finite() {
        return Err(Error::NonFinite("attention scores"));
    }
    let mut p = Matrix::zeros(s.rows(), s.cols());
    for c in 0..s.cols() {
        let rows = c * slots..(c + 1) * slots;
        let max = rows.clone().map(|r| s.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for r in rows.clone() {
            let e = ((s.get(r, c) - max) * beta).exp();
            p.set(r, c, e);
            total += e;
        }
        for r in rows {
            p[(r, c)] /= total;
        }
    }
    Ok(p)
}

fn add_col_bias(m: &Matrix, b: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let bias = b.get(r, 0);
        for v in out.row_mut(r) {
            *v += bias;
        }
    }
    out
}

fn row_sums(m: &Matrix) -> Matrix {
    Matrix::from_fn(m.rows(), 1, |r, _| m.row(r).iter().sum())
}

fn check_target(y: &Matrix, t: &Matrix) -> Result<()> {
    if y.shape() != t.shape() {
        return Err(Error::Shape {
            op: "target",
            left: y.shape(),
            right: t.shape(),
        });
    }
    Ok(())
}

/// `a · bᵀ` without materialising the transpose.
fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::Shape {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(Matrix::from_fn(a.rows(), b.rows(), |i, j| {
        a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum()
    }))
}

/// `aᵀ · b` without materialising the transpose.
fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::Shape {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.cols(), b.cols());
    let m = b.cols();
    for k in 0..a.rows() {
        let brow = b.row(k);
        for (i, &aki) in a.row(k).iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            for (o, &bkj) in out.row_mut(i)[..m].iter_mut().zip(brow) {
                *o += aki * bkj;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
struct HeadCache {
    k: Matrix,
    q: Matrix,
    v: Matrix,
    p: Matrix,
}

#[derive(Clone, Debug)]
struct SampleCache {
    zk: Matrix,
    zq: Matrix,
    heads: Vec<HeadCache>,
    cat: Matrix,
    y: Matrix,
}

/// Intermediates of one forward pass, tied to the model version it used.
#[derive(Clone, Debug)]
pub struct Cache {
    version: u64,
    inputs: Vec<Matrix>,
    samples: Vec<SampleCache>,
    /// `∂loss/∂Y` for each sample.
    output_grads: Vec<Matrix>,
}

/// Training or evaluation data: parallel lists of inputs and targets.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Vec<Matrix>,
    pub targets: Vec<Matrix>,
}

impl Dataset {
    pub fn new(inputs: Vec<Matrix>, targets: Vec<Matrix>) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::Domain(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: idx.iter().map(|&i| self.targets[i].clone()).collect(),
        }
    }
}

/// Mean squared error of the batch and the cache for [`backward`].
pub fn forward_loss(model: &TrainableModel, xs: &[Matrix], ys: &[Matrix]) -> Result<(f64, Cache)> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::Domain(format!(
            "batch needs matching nonempty inputs/targets, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let entries: usize = ys.iter().map(|t| t.data().len()).sum();
    let mut samples = Vec::with_capacity(xs.len());
    let mut output_grads = Vec::with_capacity(xs.len());
    let mut total = 0.0;
    for (x, t) in xs.iter().zip(ys) {
        let sc = model.sample_forward(x)?;
        check_target(&sc.y, t)?;
        let resid = sc.y.sub(t)?;
        total += resid.data().iter().map(|r| r * r).sum::<f64>();
        output_grads.push(resid.scale(2.0 / entries as f64));
        samples.push(sc);
    }
    let cache = Cache {
        version: model.version,
        inputs: xs.to_vec(),
        samples,
        output_grads,
    };
    Ok((total / entries as f64, cache))
}

/// Exact gradients of the cached batch loss, in registry order.
pub fn backward(model: &TrainableModel, cache: &Cache) -> Result<Vec<Matrix>> {
    backward_scaled(model, cache, 1.0)
}

/// Gradients of `scale · loss`.
pub fn backward_scaled(model: &TrainableModel, cache: &Cache, scale: f64) -> Result<Vec<Matrix>> {
    if cache.version != model.version {
        return Err(Error::StaleCache(format!(
            "cache from model version {} used with version {}",
            cache.version, model.version
        )));
    }
    let arch = &model.arch;
    let mut grads: Vec<Matrix> = model
        .params
        .iter()
        .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
        .collect();
    let (hd, beta) = (arch.head_dim, arch.beta);
    let oi = model.out_index();
    for ((x, sc), dy0) in cache.inputs.iter().zip(&cache.samples).zip(&cache.output_grads) {
        let dy = dy0.scale(scale);
        grads[oi].add_scaled_in_place(&matmul_nt(&dy, &sc.cat)?, 1.0)?;
        grads[oi + 1].add_scaled_in_place(&row_sums(&dy), 1.0)?;
        let dcat = matmul_tn(model.p(oi), &dy)?;
        let mut dzk = Matrix::zeros(sc.zk.rows(), sc.zk.cols());
        let mut dzq = Matrix::zeros(sc.zq.rows(), sc.zq.cols());
        for (h, hc) in sc.heads.iter().enumerate() {
            let base = model.head_index(h);
            let d_o = dcat.row_block(h * hd, (h + 1) * hd)?;
            let dv = matmul_nt(&d_o, &hc.p)?;
            let dp = matmul_tn(&hc.v, &d_o)?;
            // Softmax Jacobian column by column: β p ⊙ (g − ⟨p, g⟩).
            let mut ds = Matrix::zeros(dp.rows(), dp.cols());
            for c in 0..dp.cols() {
                let inner: f64 = (0..dp.rows()).map(|r| hc.p.get(r, c) * dp.get(r, c)).sum();
                for r in 0..dp.rows() {
                    ds.set(r, c, beta * hc.p.get(r, c) * (dp.get(r, c) - inner));
                }
            }
            let dk = matmul_nt(&hc.q, &ds)?;
            let dq = matmul(&hc.k, &ds)?;
            grads[base].add_scaled_in_place(&matmul_nt(&dk, &sc.zk)?, 1.0)?;
            grads[base + 1].add_scaled_in_place(&matmul_nt(&dq, &sc.zq)?, 1.0)?;
            grads[base + 2].add_scaled_in_place(&matmul_nt(&dv, &sc.zk)?, 1.0)?;
            dzk.add_scaled_in_place(&matmul_tn(model.p(base), &dk)?, 1.0)?;
            dzk.add_scaled_in_place(&matmul_tn(model.p(base + 2), &dv)?, 1.0)?;
            dzq.add_scaled_in_place(&matmul_tn(model.p(base + 1), &dq)?, 1.0)?;
        }
        front_backward(model, x, &dzk, &dzq, &mut grads)?;
    }
    Ok(grads)
}

fn front_backward(model: &TrainableModel, x: &Matrix, dzk: &Matrix, dzq: &Matrix, grads: &mut [Matrix]) -> Result<()> {
    match model.arch.front {
        FrontEnd::Identity => {}
        FrontEnd::Linear { .. } => {
            let dz = dzk.add(dzq)?;
            grads[0].add_scaled_in_place(&matmul_nt(&dz, x)?, 1.0)?;
            grads[1].add_scaled_in_place(&row_sums(&dz), 1.0)?;
        }
        FrontEnd::Slots { slots, emb, .. } => {
            let n = model.arch.tokens;
            let (xk, xq) = model.arch.split_input(x)?;
            let u1 = matmul(model.p(0), &xk)?;
            let u2 = matmul(model.p(1), &xk)?;
            let (r1, r2) = (model.p(2), model.p(3));
            let mut du1 = Matrix::zeros(emb, n);
            let mut du2 = Matrix::zeros(emb, n);
            for i in 0..n {
                for j in 0..slots {
                    let t = i * slots + j;
                    let (a, c) = (r1.get(0, j), r2.get(0, j));
                    let (mut g1, mut g2) = (0.0, 0.0);
                    for r in 0..emb {
                        let g = dzk.get(r, t);
                        du1[(r, i)] += a * g;
                        du2[(r, i)] += c * g;
                        g1 += g * u1.get(r, i);
                        g2 += g * u2.get(r, i);
                        grads[4][(r, j)] += g;
                        grads[5][(r, i)] += g;
                    }
                    grads[2][(0, j)] += g1;
                    grads[3][(0, j)] += g2;
                }
            }
            grads[0].add_scaled_in_place(&matmul_nt(&du1, &xk)?, 1.0)?;
            grads[1].add_scaled_in_place(&matmul_nt(&du2, &xk)?, 1.0)?;
            grads[6].add_scaled_in_place(&matmul_nt(dzq, &xq)?, 1.0)?;
            grads[7].add_scaled_in_place(&row_sums(dzq), 1.0)?;
            grads[8].add_scaled_in_place(dzq, 1.0)?;
        }
    }
    Ok(())
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub entries_checked: usize,
    pub max_relative_error: f64,
    pub worst_param: String,
    pub passed: bool,
}

/// Below this magnitude gradients are compared absolutely (relative error
/// is meaningless for entries that are zero up to rounding).
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Central finite differences with step `h` on every parameter entry;
/// relative error `|g − ĝ| / max(|g|, |ĝ|, floor)` must stay ≤ `rtol`.
pub fn gradient_check(model: &TrainableModel, xs: &[Matrix], ys: &[Matrix], h: f64, rtol: f64) -> Result<GradCheckReport> {
    let (_, cache) = forward_loss(model, xs, ys)?;
    let grads = backward(model, &cache)?;
    let mut probe = model.clone();
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for (pi, g) in grads.iter().enumerate() {
        for e in 0..g.data().len() {
            probe.perturb(pi, e, h)?;
            let (lp, _) = forward_loss(&probe, xs, ys)?;
            probe.perturb(pi, e, -2.0 * h)?;
            let (lm, _) = forward_loss(&probe, xs, ys)?;
            probe.set_param(pi, model.p(pi).clone())?;
            let fd = (lp - lm) / (2.0 * h);
            let an = g.data()[e];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(GRAD_CHECK_FLOOR);
            if rel > worst.0 || worst.1.is_empty() {
                worst = (rel.max(worst.0), format!("{}[{e}]", model.params[pi].name));
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        entries_checked: checked,
        max_relative_error: worst.0,
        worst_param: worst.1,
        passed: worst.0 <= rtol,
    })
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl Adam {
    pub fn new(model: &TrainableModel, lr: f64) -> Self {
        let zeros: Vec<Matrix> = model
            .params
            .iter()
            .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update `θ ← θ − lr · m̂ / (√v̂ + ε)`.
    pub fn step(&mut self, model: &mut TrainableModel, grads: &[Matrix]) -> Result<()> {
        if grads.len() != model.params.len() || self.m.len() != grads.len() {
            return Err(Error::Domain("gradient/optimizer state does not match the model".into()));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in model.params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let pd = p.value.data_mut();
            for (((th, &gi), mi), vi) in pd.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *th -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        model.version = fresh_version();
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 32,
            epochs: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.batch == 0 {
            return Err(Error::Domain(format!("invalid training config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub test_mse: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub records: Vec<EpochRecord>,
}

impl LossHistory {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// `epoch,train_mse,test_mse` (empty test column when absent).
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "train_mse", "test_mse"])?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                format!("{:e}", r.train_mse),
                r.test_mse.map(|v| format!("{v:e}")).unwrap_or_default(),
            ])?;
        }
        w.into_inner()
            .map_err(|e| Error::Io(e.into_error()))
            .and_then(|b| String::from_utf8(b).map_err(|e| Error::Parse(e.to_string())))
    }
}

/// Trained model together with its optimizer state.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: TrainableModel,
    pub optimizer: Adam,
    pub history: LossHistory,
}

/// Mini-batch Adam. Batches are drawn from a seeded shuffle each epoch; the
/// history records full-dataset MSE after every epoch (epoch 0 = initial).
pub fn train(model: TrainableModel, data: &Dataset, test: Option<&Dataset>, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    let mut model = model;
    let mut opt = Adam::new(&model, config.lr);
    let mut rng = Rng::substream(config.seed, 0x7472_6169_6e);
    let mut history = LossHistory::default();
    let record = |model: &TrainableModel, epoch: usize, history: &mut LossHistory| -> Result<()> {
        let train_mse = model.mse(data)?;
        let test_mse = test.map(|t| model.mse(t)).transpose()?;
        if !train_mse.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        history.records.push(EpochRecord { epoch, train_mse, test_mse });
        Ok(())
    };
    record(&model, 0, &mut history)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=config.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch) {
            let xs: Vec<Matrix> = chunk.iter().map(|&i| data.inputs[i].clone()).collect();
            let ys: Vec<Matrix> = chunk.iter().map(|&i| data.targets[i].clone()).collect();
            let (loss, cache) = match forward_loss(&model, &xs, &ys) {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => return Err(Error::Diverged { epoch }),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            let grads = backward(&model, &cache)?;
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
            if config.lr > 0.0 {
                opt.step(&mut model, &grads)?;
            }
        }
        record(&model, epoch, &mut history)?;
    }
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        history,
    })
}

/// Evaluation-only handle: parameters can no longer change.
#[derive(Debug)]
pub struct FrozenModel {
    model: TrainableModel,
    checksum: String,
}

/// Freeze a trained model.
pub fn freeze(model: TrainableModel) -> FrozenModel {
    let checksum = model.checksum();
    FrozenModel { model, checksum }
}

impl FrozenModel {
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn arch(&self) -> &Architecture {
        &self.model.arch
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.model.params
    }

    pub fn evaluate(&self, x: &Matrix) -> Result<Matrix> {
        self.model.predict(x)
    }

    pub fn mse(&self, data: &Dataset) -> Result<f64> {
        self.model.mse(data)
    }

    /// Always rejected.
    pub fn set_param(&mut self, _index: usize, _value: Matrix) -> Result<()> {
        Err(Error::Frozen)
    }

    /// Recompute the checksum from the stored weights.
    pub fn verify(&self) -> bool {
        self.model.checksum() == self.checksum
    }
}

/// Checkpoint: architecture, parameters, the heads in the layer format and
/// (optionally) the optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub arch: Architecture,
    pub params: Vec<NamedParam>,
    pub attention: LayerFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<Adam>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub checksum: String,
}

impl Checkpoint {
    pub fn new(model: &TrainableModel, optimizer: Option<&Adam>, seed: Option<u64>) -> Self {
        Self {
            arch: model.arch.clone(),
            params: model.params.clone(),
            attention: model.to_layer_file(),
            optimizer: optimizer.cloned(),
            seed,
            checksum: model.checksum(),
        }
    }

    pub fn model(&self) -> Result<TrainableModel> {
        let m = TrainableModel::from_params(self.arch.clone(), self.params.clone())?;
        if m.checksum() != self.checksum {
            return Err(Error::Parse("checkpoint checksum does not match its parameters".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(front: FrontEnd, heads: usize, seed: u64) -> (TrainableModel, Vec<Matrix>, Vec<Matrix>) {
        let arch = Architecture {
            input_dim: 3,
            tokens: 3,
            front,
            heads,
            head_dim: 2,
            output_dim: 2,
            beta: 0.7,
        };
        let mut rng = Rng::new(seed);
        let model = TrainableModel::init(arch, &mut rng).unwrap();
        let xs: Vec<Matrix> = (0..2).map(|_| Matrix::from_fn(3, 3, |_, _| rng.normal())).collect();
        let ys: Vec<Matrix> = (0..2).map(|_| Matrix::from_fn(2, 3, |_, _| rng.normal())).collect();
        (model, xs, ys)
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (i, front) in [
            FrontEnd::Identity,
            FrontEnd::Linear { emb: 4 },
            FrontEnd::Slots { slots: 2, emb: 3, local: false, key_rows: None },
            FrontEnd::Slots { slots: 3, emb: 3, local: true, key_rows: Some(2) },
        ]
        .into_iter()
        .enumerate()
        {
            let (model, xs, ys) = toy(front, 2, i as u64);
            let rep = gradient_check(&model, &xs, &ys, 1e-5, 1e-4).unwrap();
            assert!(rep.passed, "{rep:?}");
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let (mut model, xs, ys) = toy(FrontEnd::Identity, 1, 1);
        let (_, cache) = forward_loss(&model, &xs, &ys).unwrap();
        model.perturb(0, 0, 0.1).unwrap();
        assert!(matches!(backward(&model, &cache), Err(Error::StaleCache(_))));
    }

    #[test]
    fn adam_matches_hand_trace() {
        let arch = Architecture {
            input_dim: 1,
            tokens: 1,
            front: FrontEnd::Identity,
            heads: 1,
            head_dim: 1,
            output_dim: 1,
            beta: 1.0,
        };
        let mut model = TrainableModel::init(arch, &mut Rng::new(0)).unwrap();
        let start: Vec<f64> = model.params.iter().map(|p| p.value.data()[0]).collect();
        let mut opt = Adam::new(&model, 0.1);
        let g1: Vec<Matrix> = [0.5, -2.0, 1.0, 3.0, 0.0].iter().map(|&g| Matrix::filled(1, 1, g)).collect();
        let g2: Vec<Matrix> = [1.5, 1.0, -1.0, 3.0, 2.0].iter().map(|&g| Matrix::filled(1, 1, g)).collect();
        opt.step(&mut model, &g1).unwrap();
        opt.step(&mut model, &g2).unwrap();
        for i in 0..5 {
            let (a, b) = (g1[i].data()[0], g2[i].data()[0]);
            let m = 0.9 * (0.1 * a) + 0.1 * b;
            let v = 0.999 * (0.001 * a * a) + 0.001 * b * b;
            let mh1 = a; // first step: m̂ = g, v̂ = g²
            let vh1 = a * a;
            let step1 = 0.1 * mh1 / (vh1.sqrt() + 1e-8);
            let step2 = 0.1 * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
            let expect = start[i] - step1 - step2;
            assert!((model.params[i].value.data()[0] - expect).abs() < 1e-12, "param {i}");
        }
    }
}
