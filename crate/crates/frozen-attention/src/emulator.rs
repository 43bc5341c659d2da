//! Frozen two-layer emulators of an arbitrary attention head.
//!
//! Layer one is a large multi-head layer whose weights depend only on the
//! dimensions and on the planned value ranges; it reads the target head's
//! weights from the prompt and writes approximations `[K′; Q′; V′]` of
//! `[W_K X; W_Q X; W_V X]`. Layer two is a single head with fixed block
//! selectors computing `V′ · Softmax(K′ᵀ Q′)`.
//!
//! Two first layers are provided:
//!
//! * [`Construction::Interpolation`] — the prompt carries the weights inside
//!   the tokens ([`Layout::WeightTokens`]); every hidden row `k_j`, `q_j`,
//!   `v_j` gets a block of truncated-linear heads behind a token-wise selector
//!   that extracts that row's coefficients.
//! * [`Construction::CoordinateGrid`] — the prompt is the row stack
//!   ([`Layout::RowStack`]); every hidden row gets one head behind a
//!   sequence-wise linear connection that lays a grid `L_0 … L_P` over the key
//!   tokens and scores `−β (k_jᵀ x_c − L_r)²` (up to a per-query constant).
//!
//! Error budget: if every entry of the intermediate stack is within `eps0`,
//! every score moves by at most `Δs = d_h·eps0·(B_K + B_Q + eps0)`, every
//! softmax weight by a factor in `[e^{−2Δs}, e^{2Δs}]`, so each output entry
//! moves by at most `eps0 + B_V (e^{2Δs} − 1) ≤ eps0 + B_V eps1`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::algorithms::AlgorithmSpec;
use crate::attention::{forward_head, forward_multi, AttentionHead, HeadGroup, LinearConnection, LinearTerm, MultiHeadAttention};
use crate::error::{Error, Result};
use crate::grid::{plan_truncated_linear, truncated_linear_heads, InterpolationPlan, SCORE_MAGNITUDE_GUARD};
use crate::linalg::{matmul, sup_norm, sup_norm_diff, Matrix};
use crate::prompt::{decode_target_head, encode_rowstack, encode_target_head, widened_range, Layout, PromptEncoding};

/// Largest grid the coordinate construction will materialise.
pub const MAX_COORDINATE_GRID: usize = 2_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Construction {
    /// Weights inside the tokens, truncated-linear head blocks.
    Interpolation,
    /// Row-stacked weights, one grid head per hidden coordinate.
    CoordinateGrid,
}

impl Construction {
    pub fn layout(self) -> Layout {
        match self {
            Construction::Interpolation => Layout::WeightTokens,
            Construction::CoordinateGrid => Layout::RowStack,
        }
    }
}

/// A target attention head `W_V X · Softmax((W_K X)ᵀ W_Q X)` (unit temperature,
/// identity output projection).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetHead {
    #[serde(rename = "W_K")]
    pub w_k: Matrix,
    #[serde(rename = "W_Q")]
    pub w_q: Matrix,
    #[serde(rename = "W_V")]
    pub w_v: Matrix,
}

impl TargetHead {
    pub fn new(w_k: Matrix, w_q: Matrix, w_v: Matrix) -> Result<Self> {
        let d = w_k.cols();
        if w_q.shape() != w_k.shape() || w_v.cols() != d {
            return Err(Error::Shape {
                op: "TargetHead::new",
                left: w_k.shape(),
                right: w_v.shape(),
            });
        }
        Ok(Self { w_k, w_q, w_v })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.w_k.cols(), self.w_k.rows(), self.w_v.rows())
    }

    pub fn head(&self) -> Result<AttentionHead> {
        AttentionHead::plain(self.w_k.clone(), self.w_q.clone(), self.w_v.clone())
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        forward_head(&self.head()?, x)
    }

    /// Zero-pad to `d_h` key/query rows and `d_o` value rows; the output gains
    /// zero rows and is otherwise unchanged.
    pub fn padded(&self, d_h: usize, d_o: usize) -> Result<Self> {
        let (d, h, o) = self.dims();
        if d_h < h || d_o < o {
            return Err(Error::Domain(format!("cannot pad ({h}, {o}) rows down to ({d_h}, {d_o})")));
        }
        let pad = |m: &Matrix, rows: usize| {
            let mut out = Matrix::zeros(rows, d);
            out.set_block(0, 0, m).map(|_| out)
        };
        Self::new(pad(&self.w_k, d_h)?, pad(&self.w_q, d_h)?, pad(&self.w_v, d_o)?)
    }
}

/// Token count and head dimensions an emulator is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmulatorDims {
    pub d: usize,
    pub n: usize,
    pub d_h: usize,
    pub d_o: usize,
}

impl EmulatorDims {
    /// Rows of the intermediate stack `[K′; Q′; V′]`.
    pub fn hidden_rows(&self) -> usize {
        2 * self.d_h + self.d_o
    }
}

/// Value statistics of a prompt (or the worst case over a library).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductBounds {
    /// Widened ranges of `W_K X`, `W_Q X`, `W_V X`.
    pub ranges: [(f64, f64); 3],
    pub b_k: f64,
    pub b_q: f64,
    pub b_v: f64,
    /// Largest `|entry|` of `X`, `W_K`, `W_Q`, `W_V`.
    pub b_entries: f64,
}

impl ProductBounds {
    pub fn measure(x: &Matrix, t: &TargetHead) -> Result<Self> {
        let k = matmul(&t.w_k, x)?;
        let q = matmul(&t.w_q, x)?;
        let v = matmul(&t.w_v, x)?;
        let b_entries = [x, &t.w_k, &t.w_q, &t.w_v].iter().map(|m| sup_norm(m)).fold(0.0, f64::max);
        Ok(Self {
            ranges: [widened_range(&[&k]), widened_range(&[&q]), widened_range(&[&v])],
            b_k: sup_norm(&k),
            b_q: sup_norm(&q),
            b_v: sup_norm(&v),
            b_entries,
        })
    }

    /// Smallest bounds covering all members.
    pub fn union(all: &[ProductBounds]) -> Result<Self> {
        let first = all.first().ok_or_else(|| Error::Domain("no bounds to combine".into()))?;
        let mut out = first.clone();
        for b in &all[1..] {
            for g in 0..3 {
                out.ranges[g].0 = out.ranges[g].0.min(b.ranges[g].0);
                out.ranges[g].1 = out.ranges[g].1.max(b.ranges[g].1);
            }
            out.b_k = out.b_k.max(b.b_k);
            out.b_q = out.b_q.max(b.b_q);
            out.b_v = out.b_v.max(b.b_v);
            out.b_entries = out.b_entries.max(b.b_entries);
        }
        Ok(out)
    }

    /// `B_KQV`, the largest intermediate magnitude.
    pub fn b_kqv(&self) -> f64 {
        self.b_k.max(self.b_q).max(self.b_v)
    }

    /// Whether `other` lies within these bounds.
    pub fn covers(&self, other: &ProductBounds) -> std::result::Result<(), String> {
        const NAMES: [&str; 3] = ["key", "query", "value"];
        for g in 0..3 {
            let (a, b) = self.ranges[g];
            let (lo, hi) = other.ranges[g];
            if lo < a || hi > b {
                return Err(format!(
                    "{} products span [{lo:.4}, {hi:.4}] but the grid covers [{a:.4}, {b:.4}]",
                    NAMES[g]
                ));
            }
        }
        let pairs = [(other.b_k, self.b_k, "B_K"), (other.b_q, self.b_q, "B_Q"), (other.b_v, self.b_v, "B_V")];
        for (got, planned, name) in pairs {
            if got > planned {
                return Err(format!("{name} = {got:.4} exceeds the planned {planned:.4}"));
            }
        }
        if other.b_entries > self.b_entries {
            return Err(format!(
                "entry magnitude {:.4} exceeds the planned {:.4}",
                other.b_entries, self.b_entries
            ));
        }
        Ok(())
    }
}

/// Grid, temperature and head count for one of the key / query / value groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupPlan {
    pub a: f64,
    pub b: f64,
    pub beta: f64,
    /// Number of grid intervals `P`.
    pub grid_size: usize,
    pub delta: f64,
    /// Heads per hidden row (`H`; one for the coordinate grid).
    pub heads_per_row: usize,
    /// Certified per-entry error of the intermediate stack.
    pub bound: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interpolation: Option<InterpolationPlan>,
}

/// The complete budget split and per-group plans.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterPlan {
    pub eps: f64,
    /// Allowed per-entry error of `[K′; Q′; V′]`.
    pub eps0: f64,
    /// Allowed ℓ1 perturbation of every softmax column.
    pub eps1: f64,
    pub bounds: ProductBounds,
    /// `eps0 + B_V·eps1`, the certified output error.
    pub budget: f64,
    pub groups: Vec<GroupPlan>,
}

impl ParameterPlan {
    pub fn total_heads(&self, dims: &EmulatorDims) -> usize {
        let rows = [dims.d_h, dims.d_h, dims.d_o];
        self.groups.iter().zip(rows).map(|(g, r)| g.heads_per_row * r).sum()
    }

    pub fn max_beta(&self) -> f64 {
        self.groups.iter().map(|g| g.beta).fold(0.0, f64::max)
    }

    pub fn max_grid(&self) -> usize {
        self.groups.iter().map(|g| g.grid_size).max().unwrap_or(0)
    }

    pub fn max_heads_per_row(&self) -> usize {
        self.groups.iter().map(|g| g.heads_per_row).max().unwrap_or(0)
    }
}

/// Split an output budget `eps` into `(eps0, eps1, budget)`.
///
/// `eps1 = ln(1 + eps/2)/(2 B_KQV + 1)`; `eps0` is the largest value with
/// `d_h·eps0·(B_K + B_Q + eps0) ≤ ½ ln(1 + eps1)`, capped at `eps/2`, so that
/// `budget = eps0 + B_V·eps1 < eps`.
pub fn split_budget(eps: f64, d_h: usize, bounds: &ProductBounds) -> Result<(f64, f64, f64)> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Domain(format!("eps must be positive and finite, got {eps}")));
    }
    let eps1 = (eps / 2.0).ln_1p() / (2.0 * bounds.b_kqv() + 1.0);
    let c = 0.5 * eps1.ln_1p() / d_h.max(1) as f64;
    let s = bounds.b_k + bounds.b_q;
    let root = 2.0 * c / (s + (s * s + 4.0 * c).sqrt());
    let eps0 = root.min(eps / 2.0);
    Ok((eps0, eps1, eps0 + bounds.b_v * eps1))
}

fn rescale_infeasible(err: Error, eps: f64, eps0: f64) -> Error {
    match err {
        Error::Infeasible { reason, smallest_eps } => Error::Infeasible {
            reason,
            smallest_eps: eps * smallest_eps / eps0,
        },
        other => other,
    }
}

/// Plan the interpolation construction: one truncated-linear block per group
/// on that group's range, each with per-entry bound `eps0`, i.e.
/// `H = ⌈2(b − a)/((n − 2) eps0)⌉` heads per hidden row.
pub fn plan_parameters(eps: f64, bounds: &ProductBounds, dims: &EmulatorDims) -> Result<ParameterPlan> {
    if dims.n < 3 {
        return Err(Error::Domain(format!("the interpolation construction needs n >= 3, got {}", dims.n)));
    }
    let (eps0, eps1, budget) = split_budget(eps, dims.d_h, bounds)?;
    let mut groups = Vec::with_capacity(3);
    for &(a, b) in &bounds.ranges {
        if !(a < b) {
            return Err(Error::Domain(format!("empty range [{a}, {b}]")));
        }
        let plan = plan_truncated_linear(a, b, dims.n, eps0).map_err(|e| rescale_infeasible(e, eps, eps0))?;
        groups.push(GroupPlan {
            a,
            b,
            beta: plan.beta,
            grid_size: plan.grid.p,
            delta: plan.grid.delta,
            heads_per_row: plan.heads,
            bound: plan.bound,
            interpolation: Some(plan),
        });
    }
    Ok(ParameterPlan {
        eps,
        eps0,
        eps1,
        bounds: bounds.clone(),
        budget,
        groups,
    })
}

/// Plan the coordinate-grid construction on `[−R, R]`, `R = d·B²`: spacing
/// `ΔL = eps0/2` (so `P ≥ 4R/eps0`) and
/// `β = (4/(3ΔL²))·ln(4R(P+1)/eps0)`, which makes the per-coordinate error
/// `ΔL + (P+1)·e^{−¾βΔL²}·2R ≤ eps0`.
pub fn plan_coordinate_grid(eps: f64, bounds: &ProductBounds, dims: &EmulatorDims) -> Result<ParameterPlan> {
    let (eps0, eps1, budget) = split_budget(eps, dims.d_h, bounds)?;
    let radius = (dims.d as f64 * bounds.b_entries * bounds.b_entries).max(1e-6);
    let p = ((4.0 * radius / eps0).ceil() as usize).max(dims.n.saturating_sub(1)).max(1);
    if p > MAX_COORDINATE_GRID {
        return Err(Error::Infeasible {
            reason: format!("the coordinate grid needs {p} points (limit {MAX_COORDINATE_GRID})"),
            smallest_eps: eps * p as f64 / MAX_COORDINATE_GRID as f64,
        });
    }
    let delta = 2.0 * radius / p as f64;
    let beta = 4.0 / (3.0 * delta * delta) * (4.0 * radius * (p + 1) as f64 / eps0).ln().max(1.0);
    let magnitude = beta * 3.0 * radius * radius;
    if magnitude > SCORE_MAGNITUDE_GUARD {
        return Err(Error::Infeasible {
            reason: format!("pre-shift scores reach {magnitude:.3e} (guard {SCORE_MAGNITUDE_GUARD:.0e})"),
            smallest_eps: eps * (magnitude / SCORE_MAGNITUDE_GUARD).sqrt(),
        });
    }
    let bound = coordinate_bound(delta, p, beta, radius);
    let group = GroupPlan {
        a: -radius,
        b: radius,
        beta,
        grid_size: p,
        delta,
        heads_per_row: 1,
        bound,
        interpolation: None,
    };
    Ok(ParameterPlan {
        eps,
        eps0,
        eps1,
        bounds: bounds.clone(),
        budget,
        groups: vec![group.clone(), group.clone(), group],
    })
}

/// Per-coordinate bound `ΔL + (P+1)·e^{−¾βΔL²}·2R` of the coordinate grid.
pub fn coordinate_bound(delta: f64, p: usize, beta: f64, radius: f64) -> f64 {
    delta + (p + 1) as f64 * (-0.75 * beta * delta * delta).exp() * 2.0 * radius
}

/// The fixed second layer: keys `K′`, queries `Q′`, values `V′` selected from
/// the `[K′; Q′; V′]` stack.
pub fn readout_head(d_h: usize, d_o: usize) -> Result<AttentionHead> {
    let rows = 2 * d_h + d_o;
    let select = |count: usize, start: usize| Matrix::from_fn(count, rows, |r, c| if c == start + r { 1.0 } else { 0.0 });
    AttentionHead::plain(select(d_h, 0), select(d_h, d_h), select(d_o, 2 * d_h))
}

/// A frozen two-layer emulator.
#[derive(Clone, Debug)]
pub struct FrozenEmulator {
    pub first_layer: MultiHeadAttention,
    pub readout: AttentionHead,
    pub plan: ParameterPlan,
    pub construction: Construction,
    pub dims: EmulatorDims,
}

/// Which hidden row `g` of `[K′; Q′; V′]` belongs to: group index and row within it.
fn group_of(dims: &EmulatorDims, g: usize) -> (usize, usize) {
    if g < dims.d_h {
        (0, g)
    } else if g < 2 * dims.d_h {
        (1, g - dims.d_h)
    } else {
        (2, g - 2 * dims.d_h)
    }
}

/// Assemble the interpolation emulator from a plan.
pub fn build_interpolation_planned(dims: EmulatorDims, plan: ParameterPlan) -> Result<FrozenEmulator> {
    let EmulatorDims { d, n, .. } = dims;
    let hidden = dims.hidden_rows();
    let len = hidden * d;
    let width = d + 2 * len + n;
    let mut blocks = Vec::with_capacity(3);
    for gp in &plan.groups {
        let ip = gp
            .interpolation
            .as_ref()
            .ok_or_else(|| Error::Domain("plan lacks interpolation grids".into()))?;
        let heads: std::sync::Arc<[AttentionHead]> = truncated_linear_heads(d, &ip.grid, n, ip.beta, 0.0)?.into();
        blocks.push(heads);
    }
    let mut groups = Vec::with_capacity(hidden);
    for g in 0..hidden {
        // Selector: X, the scaled and constant copies of row g's coefficients, I_n.
        let mut a = Matrix::zeros(3 * d + n, width);
        for r in 0..d {
            a.set(r, r, 1.0);
            a.set(d + r, d + g * d + r, 1.0);
            a.set(2 * d + r, d + len + g * d + r, 1.0);
        }
        for j in 0..n {
            a.set(3 * d + j, d + 2 * len + j, 1.0);
        }
        groups.push(HeadGroup {
            prefix: Some(LinearConnection::token_wise(a)),
            heads: blocks[group_of(&dims, g).0].clone(),
            row_offset: g,
        });
    }
    Ok(FrozenEmulator {
        first_layer: MultiHeadAttention::new(groups, hidden)?,
        readout: readout_head(dims.d_h, dims.d_o)?,
        plan,
        construction: Construction::Interpolation,
        dims,
    })
}

/// Assemble the coordinate-grid emulator from a plan.
pub fn build_coordinate_grid_planned(dims: EmulatorDims, plan: ParameterPlan) -> Result<FrozenEmulator> {
    let EmulatorDims { d, n, d_h, d_o } = dims;
    let gp = plan.groups.first().ok_or_else(|| Error::Domain("empty plan".into()))?;
    let p1 = gp.grid_size + 1;
    if p1 < n {
        return Err(Error::Domain(format!("grid of {p1} points cannot hold {n} tokens")));
    }
    let width = n.max(d_h).max(d_o);
    let levels: Vec<f64> = (0..p1).map(|r| gp.a + r as f64 * gp.delta).collect();
    let rows = 2 * d + 3;

    // Shared by every hidden row: keys (2L_r k; −L_r²), queries (x_c; 1), value L_r.
    let mut w_k = Matrix::zeros(d + 1, rows);
    let mut w_q = Matrix::zeros(d + 1, rows);
    for r in 0..d {
        w_k.set(r, d + r, 1.0);
        w_q.set(r, r, 1.0);
    }
    w_k.set(d, 2 * d + 2, 1.0);
    w_q.set(d, 2 * d, 1.0);
    let mut w_v = Matrix::zeros(1, rows);
    w_v.set(0, 2 * d + 1, 1.0);
    let w_o = Matrix::from_fn(p1, n, |r, c| if r == c { 1.0 } else { 0.0 });
    let head: std::sync::Arc<[AttentionHead]> = vec![AttentionHead::new(w_k, w_q, w_v, Some(w_o), gp.beta)?].into();

    let mut x_left = Matrix::zeros(rows, 4 * d);
    for r in 0..d {
        x_left.set(r, r, 1.0);
    }
    let x_right = Matrix::from_fn(width, p1, |r, c| if r == c && r < n { 1.0 } else { 0.0 });
    let mut bias = Matrix::zeros(rows, p1);
    for (c, &l) in levels.iter().enumerate() {
        if c < n {
            bias.set(2 * d, c, 1.0);
        }
        bias.set(2 * d + 1, c, l);
        bias.set(2 * d + 2, c, -l * l);
    }

    let hidden = dims.hidden_rows();
    let mut groups = Vec::with_capacity(hidden);
    for g in 0..hidden {
        let (block, j) = group_of(&dims, g);
        let mut w_left = Matrix::zeros(rows, 4 * d);
        for r in 0..d {
            w_left.set(d + r, (block + 1) * d + r, 1.0);
        }
        let mut w_right = Matrix::zeros(width, p1);
        for (c, &l) in levels.iter().enumerate() {
            w_right.set(j, c, 2.0 * l);
        }
        let prefix = LinearConnection {
            terms: vec![
                LinearTerm {
                    left: x_left.clone(),
                    right: Some(x_right.clone()),
                },
                LinearTerm {
                    left: w_left,
                    right: Some(w_right),
                },
            ],
            bias: Some(bias.clone()),
        };
        groups.push(HeadGroup {
            prefix: Some(prefix),
            heads: head.clone(),
            row_offset: g,
        });
    }
    Ok(FrozenEmulator {
        first_layer: MultiHeadAttention::new(groups, hidden)?,
        readout: readout_head(d_h, d_o)?,
        plan,
        construction: Construction::CoordinateGrid,
        dims,
    })
}

fn prompt_target(prompt: &PromptEncoding) -> Result<(Matrix, TargetHead, EmulatorDims)> {
    let (x, k, q, v) = decode_target_head(prompt)?;
    let dims = EmulatorDims {
        d: prompt.meta.d,
        n: prompt.meta.n,
        d_h: prompt.meta.d_h,
        d_o: prompt.meta.d_o,
    };
    Ok((x, TargetHead::new(k, q, v)?, dims))
}

/// Build the interpolation emulator planned for one weight-in-token prompt.
pub fn build_interpolation(prompt: &PromptEncoding, eps: f64) -> Result<FrozenEmulator> {
    if prompt.layout != Layout::WeightTokens {
        return Err(Error::Domain("the interpolation construction reads weight-in-token prompts".into()));
    }
    let (x, target, dims) = prompt_target(prompt)?;
    let bounds = ProductBounds::measure(&x, &target)?;
    build_interpolation_planned(dims, plan_parameters(eps, &bounds, &dims)?)
}

/// Build the coordinate-grid emulator planned for one row-stack prompt.
pub fn build_coordinate_grid(prompt: &PromptEncoding, eps: f64) -> Result<FrozenEmulator> {
    if prompt.layout != Layout::RowStack {
        return Err(Error::Domain("the coordinate-grid construction reads row-stack prompts".into()));
    }
    let (x, target, dims) = prompt_target(prompt)?;
    let bounds = ProductBounds::measure(&x, &target)?;
    build_coordinate_grid_planned(dims, plan_coordinate_grid(eps, &bounds, &dims)?)
}

/// Build either construction for `target` on input `x`.
pub fn build(construction: Construction, x: &Matrix, target: &TargetHead, eps: f64) -> Result<FrozenEmulator> {
    build_for_library(construction, x, std::slice::from_ref(target), eps)
}

/// Build one emulator whose grids cover every member of `library` on `x`,
/// with all members padded to a common `d_h` and `d_o`.
pub fn build_for_library(construction: Construction, x: &Matrix, library: &[TargetHead], eps: f64) -> Result<FrozenEmulator> {
    let d_h = library.iter().map(|t| t.dims().1).max().ok_or_else(|| Error::Domain("empty library".into()))?;
    let d_o = library.iter().map(|t| t.dims().2).max().unwrap_or(0);
    let dims = EmulatorDims { d: x.rows(), n: x.cols(), d_h, d_o };
    let bounds = library
        .iter()
        .map(|t| {
            if t.dims().0 != dims.d {
                return Err(Error::Shape {
                    op: "build_for_library",
                    left: t.w_k.shape(),
                    right: x.shape(),
                });
            }
            ProductBounds::measure(x, t)
        })
        .collect::<Result<Vec<_>>>()?;
    let bounds = ProductBounds::union(&bounds)?;
    match construction {
        Construction::Interpolation => build_interpolation_planned(dims, plan_parameters(eps, &bounds, &dims)?),
        Construction::CoordinateGrid => build_coordinate_grid_planned(dims, plan_coordinate_grid(eps, &bounds, &dims)?),
    }
}

impl FrozenEmulator {
    /// The prompt this emulator expects for `target` on `x`.
    pub fn prompt_for(&self, x: &Matrix, target: &TargetHead) -> Result<PromptEncoding> {
        let t = target.padded(self.dims.d_h, self.dims.d_o)?;
        match self.construction {
            Construction::Interpolation => encode_target_head(x, &t.w_k, &t.w_q, &t.w_v),
            Construction::CoordinateGrid => encode_rowstack(x, &t.w_k, &t.w_q, &t.w_v),
        }
    }

    /// Reject prompts of the wrong shape or outside the planned ranges.
    pub fn check_prompt(&self, prompt: &PromptEncoding) -> Result<()> {
        if prompt.layout != self.construction.layout() {
            return Err(Error::Domain(format!(
                "prompt layout {:?} does not match the {:?} construction",
                prompt.layout, self.construction
            )));
        }
        let (x, target, dims) = prompt_target(prompt)?;
        if dims != self.dims {
            return Err(Error::Domain(format!("prompt dims {dims:?} differ from emulator dims {:?}", self.dims)));
        }
        let measured = ProductBounds::measure(&x, &target)?;
        self.plan
            .bounds
            .covers(&measured)
            .map_err(|why| Error::ReplanRequired(why))
    }

    /// Layer-one output `[K′; Q′; V′]`.
    pub fn intermediate(&self, input: &Matrix) -> Result<Matrix> {
        forward_multi(&self.first_layer, input)
    }

    /// Full two-layer forward on a raw input matrix.
    pub fn forward(&self, input: &Matrix) -> Result<Matrix> {
        forward_head(&self.readout, &self.intermediate(input)?)
    }

    /// Checked forward on an encoded prompt.
    pub fn forward_prompt(&self, prompt: &PromptEncoding) -> Result<Matrix> {
        self.check_prompt(prompt)?;
        self.forward(&prompt.matrix()?)
    }

    /// SHA-256 over every weight of both layers.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(self.first_layer.checksum().as_bytes());
        crate::attention::hash_head(&mut hasher, &self.readout);
        crate::linalg::hex(&hasher.finalize())
    }

    pub fn head_count(&self) -> usize {
        self.first_layer.head_count() + 1
    }
}

/// Plan parameters reported alongside a measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportParams {
    /// Largest first-layer temperature.
    pub beta: f64,
    /// Largest grid size `P`.
    pub p: usize,
    /// Largest head count per hidden row `H`.
    pub h: usize,
    /// Total first-layer heads `N`.
    pub n_heads: usize,
}

/// Outcome of one emulation measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmulationReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub construction: Construction,
    pub dims: EmulatorDims,
    /// `‖emulated − target‖∞`, recomputed from the raw outputs.
    pub measured_error: f64,
    /// `‖[K′; Q′; V′] − [K; Q; V]‖∞`, when the target's stack is known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intermediate_error: Option<f64>,
    pub theoretical_budget: f64,
    pub eps: f64,
    pub eps0: f64,
    pub eps1: f64,
    pub b_kqv: f64,
    pub params: ReportParams,
    pub runtime_secs: f64,
    pub weight_checksum: String,
    pub plan: ParameterPlan,
}

fn base_report(emulator: &FrozenEmulator, measured_error: f64, runtime_secs: f64) -> EmulationReport {
    let plan = &emulator.plan;
    EmulationReport {
        name: None,
        construction: emulator.construction,
        dims: emulator.dims,
        measured_error,
        intermediate_error: None,
        theoretical_budget: plan.budget,
        eps: plan.eps,
        eps0: plan.eps0,
        eps1: plan.eps1,
        b_kqv: plan.bounds.b_kqv(),
        params: ReportParams {
            beta: plan.max_beta(),
            p: plan.max_grid(),
            h: plan.max_heads_per_row(),
            n_heads: emulator.first_layer.head_count(),
        },
        runtime_secs,
        weight_checksum: emulator.checksum(),
        plan: plan.clone(),
    }
}

/// Run the emulator on `prompt` and compare against `target_forward`.
pub fn measure_emulation(
    emulator: &FrozenEmulator,
    prompt: &PromptEncoding,
    target_forward: impl Fn(&PromptEncoding) -> Result<Matrix>,
) -> Result<EmulationReport> {
    let start = Instant::now();
    let emulated = emulator.forward_prompt(prompt)?;
    let runtime = start.elapsed().as_secs_f64();
    let target = target_forward(prompt)?;
    Ok(base_report(emulator, sup_norm_diff(&emulated, &target)?, runtime))
}

/// [`measure_emulation`] against the head decoded from the prompt, also
/// recording the intermediate-stack error.
pub fn measure_against_prompt(emulator: &FrozenEmulator, prompt: &PromptEncoding) -> Result<EmulationReport> {
    emulator.check_prompt(prompt)?;
    let (x, target, _) = prompt_target(prompt)?;
    let start = Instant::now();
    let input = prompt.matrix()?;
    let stack = emulator.intermediate(&input)?;
    let emulated = forward_head(&emulator.readout, &stack)?;
    let runtime = start.elapsed().as_secs_f64();
    let exact = crate::linalg::stack_rows(&[&matmul(&target.w_k, &x)?, &matmul(&target.w_q, &x)?, &matmul(&target.w_v, &x)?])?;
    let mut report = base_report(emulator, sup_norm_diff(&emulated, &target.forward(&x)?)?, runtime);
    report.intermediate_error = Some(sup_norm_diff(&stack, &exact)?);
    Ok(report)
}

/// Evaluate every library member through the same frozen emulator by
/// changing only the prompt. The weights are checksummed before and after.
pub fn swap_algorithm(emulator: &FrozenEmulator, library: &[AlgorithmSpec], x: &Matrix) -> Result<Vec<EmulationReport>> {
    let before = emulator.checksum();
    let mut reports = Vec::with_capacity(library.len());
    for spec in library {
        let target = spec.target_head()?;
        let prompt = emulator.prompt_for(x, &target)?;
        let mut report = measure_against_prompt(emulator, &prompt)?;
        report.name = Some(spec.display_name());
        reports.push(report);
    }
    let after = emulator.checksum();
    if before != after {
        return Err(Error::Domain("emulator weights changed during swapping".into()));
    }
    Ok(reports)
}
