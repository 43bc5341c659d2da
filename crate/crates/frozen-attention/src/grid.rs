//! Interpolation grids, finite-temperature hardmax planning, and the
//! multi-head construction that evaluates a clamped linear map `w_sᵀx`
//! in-context.
//!
//! # The construction
//!
//! Input tokens are lifted to `A(X) = [X; W_s; I_n]` where the two `W_s`
//! blocks hold `(j · w_s)` and `w_s` in token `j`. Head `h` (1-based) owns
//! the grid indices `k_j = (h-1)(n-2) - 1 + j` for token slots `j = 0..n`, and
//! scores slot `j` for query token `i` with
//!
//! ```text
//! β · (2 k_j s_i − ℓ_{k_j}),   s_i = w_sᵀ x_i + t,   ℓ_k = k (L̃_k + L̃_0)
//! ```
//!
//! which equals `−(β/ΔL)(L̃_k − s_i)²` up to a per-query constant. Softmax
//! therefore concentrates on the grid point nearest `s_i`. Interior slots
//! carry `L̃_k` as their value; the two end slots of every head carry zero so
//! that heads whose range does not contain `s_i` stay silent — except the very
//! first and last end slots, which carry `a` and `b` so that values outside
//! `[a, b]` are clamped rather than zeroed.

use serde::{Deserialize, Serialize};

use crate::attention::{forward_multi, AttentionHead, HeadGroup, LinearConnection, MultiHeadAttention};
use crate::error::{Error, Result};
use crate::linalg::{sup_norm, Matrix};

/// Scores are built from raw (unshifted) products; beyond this magnitude the
/// rounding error of a single score starts to eat into the hardmax gap.
pub const SCORE_MAGNITUDE_GUARD: f64 = 1e12;

/// `Range_[a,b](x)`: `x` clamped to `[a, b]`.
pub fn range_clamp(x: f64, a: f64, b: f64) -> Result<f64> {
    if a > b {
        return Err(Error::Domain(format!("empty range [{a}, {b}]")));
    }
    Ok(x.clamp(a, b))
}

/// Uniform partition `L̃_i = a + (i/p)(b − a)`, `i = 0..=p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpolationGrid {
    pub a: f64,
    pub b: f64,
    pub p: usize,
    pub points: Vec<f64>,
    pub delta: f64,
}

pub fn make_grid(a: f64, b: f64, p: usize) -> Result<InterpolationGrid> {
    if !(a < b) || !a.is_finite() || !b.is_finite() {
        return Err(Error::Domain(format!("degenerate interval [{a}, {b}]")));
    }
    if p == 0 {
        return Err(Error::Domain("a grid needs at least one step".into()));
    }
    let points = (0..=p).map(|i| grid_value(a, b, p, i as i64)).collect();
    Ok(InterpolationGrid {
        a,
        b,
        p,
        points,
        delta: (b - a) / p as f64,
    })
}

fn grid_value(a: f64, b: f64, p: usize, i: i64) -> f64 {
    if i == 0 {
        a
    } else if i == p as i64 {
        b
    } else {
        a + (i as f64 / p as f64) * (b - a)
    }
}

impl InterpolationGrid {
    /// `L̃_i`, extended linearly to indices just outside `0..=p`.
    pub fn value(&self, i: i64) -> f64 {
        if (0..=self.p as i64).contains(&i) {
            self.points[i as usize]
        } else {
            grid_value(self.a, self.b, self.p, i)
        }
    }

    /// `ℓ_k = k (L̃_k + L̃_0)`.
    pub fn ell(&self, k: i64) -> f64 {
        k as f64 * (self.value(k) + self.a)
    }

    /// The same interval with `p` rounded up to a multiple of `m`.
    pub fn padded_to_multiple(&self, m: usize) -> Result<InterpolationGrid> {
        make_grid(self.a, self.b, self.p.div_ceil(m) * m)
    }
}

/// Which form of the hardmax lemma a plan certifies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HardmaxCase {
    /// Unique maximum; `gap = x₁ − x₂`.
    UniqueMax,
    /// Top two entries (possibly tied); `gap = x₁ − x₃`.
    TwoLargest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardmaxPlan {
    pub n: usize,
    pub eps: f64,
    pub gap: f64,
    pub case: HardmaxCase,
    pub beta_min: f64,
}

/// Smallest temperature for which softmax is within `eps` of the hardmax
/// (or of the two-point mixture, for [`HardmaxCase::TwoLargest`]).
pub fn plan_hardmax_beta(n: usize, gap: f64, eps: f64, case: HardmaxCase) -> Result<HardmaxPlan> {
    if !(gap > 0.0) {
        return Err(Error::Domain(format!("score gap must be positive, got {gap}")));
    }
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("eps must be positive, got {eps}")));
    }
    let others = match case {
        HardmaxCase::UniqueMax if n >= 2 => n - 1,
        HardmaxCase::TwoLargest if n >= 3 => n - 2,
        _ => return Err(Error::Domain(format!("vector length {n} too short for {case:?}"))),
    };
    let beta_min = ((others as f64).ln() - eps.ln()) / gap;
    Ok(HardmaxPlan {
        n,
        eps,
        gap,
        case,
        // A target eps above (n-1) would give a negative bound; any β works then.
        beta_min: beta_min.max(f64::MIN_POSITIVE),
    })
}

/// Position of a value relative to one head's interpolation range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadCase {
    /// Inside the head's interior points `[L̃_{(h-1)(n-2)}, L̃_{h(n-2)-1}]`.
    Case1,
    /// Outside `[L̃_{(h-1)(n-2)-1}, L̃_{h(n-2)}]`.
    Case2,
    /// Strictly inside one of the two gaps at the ends of the head's range.
    Case3,
}

/// Classify `a_val` against head `h` (1-based). Interior ranges are closed and
/// end gaps open, so every value gets exactly one case per head.
pub fn classify_head_case(a_val: f64, h: usize, grid: &InterpolationGrid, n: usize) -> Result<HeadCase> {
    if n < 3 {
        return Err(Error::Domain("head cases need n >= 3".into()));
    }
    let slots = n - 2;
    let heads = grid.p / slots;
    if h == 0 || h > heads {
        return Err(Error::Index { index: h, len: heads });
    }
    let lo = ((h - 1) * slots) as i64;
    let hi = (h * slots) as i64 - 1;
    let (first, last) = (grid.value(lo), grid.value(hi));
    if (first..=last).contains(&a_val) {
        return Ok(HeadCase::Case1);
    }
    let left_gap = grid.value(lo - 1) < a_val && a_val < first;
    let right_gap = last < a_val && a_val < grid.value(hi + 1);
    Ok(if left_gap || right_gap {
        HeadCase::Case3
    } else {
        HeadCase::Case2
    })
}

/// Chosen grid, head count, temperature and the error budget they certify
/// for one truncated-linear block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpolationPlan {
    pub grid: InterpolationGrid,
    pub n: usize,
    pub heads: usize,
    pub beta: f64,
    /// Aggregate softmax leakage `(H+3)(n-1)·exp(−β ΔL)`.
    pub eps0: f64,
    /// `(b − a)/((n − 2) H)`.
    pub interpolation: f64,
    /// `max(|a|,|b|)·eps0 + interpolation`.
    pub bound: f64,
}

/// Aggregate leakage of the `H`-head construction at temperature `beta`.
///
/// Every slot other than the two grid points bracketing `s` sits at least
/// `β ΔL` below its head's top score, and each head has `n − 1` such slots; the
/// extra three heads' worth covers renormalisation of the heads that share
/// the bracketing points.
pub fn leakage(heads: usize, n: usize, beta: f64, delta: f64) -> f64 {
    ((heads + 3) * (n - 1)) as f64 * (-beta * delta).exp()
}

/// Temperature at which [`leakage`] equals `eps0`.
pub fn beta_for_leakage(heads: usize, n: usize, delta: f64, eps0: f64) -> Result<f64> {
    let effective_len = (heads + 3) * (n - 1) + 1;
    Ok(plan_hardmax_beta(effective_len, delta, eps0, HardmaxCase::UniqueMax)?.beta_min)
}

/// Plan a block on `[a, b]` whose total bound is at most `eps`: half the
/// budget goes to interpolation, half to softmax leakage.
pub fn plan_truncated_linear(a: f64, b: f64, n: usize, eps: f64) -> Result<InterpolationPlan> {
    if n < 3 {
        return Err(Error::Domain("the truncated-linear construction needs n >= 3 tokens".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("eps must be positive, got {eps}")));
    }
    let slots = n - 2;
    let heads = ((b - a) / (slots as f64 * eps / 2.0)).ceil().max(1.0) as usize;
    plan_with_heads(a, b, n, heads, eps / 2.0)
}

/// Plan a block with a fixed head count, choosing `beta` so that the
/// leakage term `max(|a|,|b|)·eps0` is at most `leak_budget`.
pub fn plan_with_heads(a: f64, b: f64, n: usize, heads: usize, leak_budget: f64) -> Result<InterpolationPlan> {
    if n < 3 {
        return Err(Error::Domain("the truncated-linear construction needs n >= 3 tokens".into()));
    }
    let grid = make_grid(a, b, heads * (n - 2))?;
    let m_v = a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
    let beta = beta_for_leakage(heads, n, grid.delta, leak_budget / m_v)?;
    plan_from_parts(grid, n, beta)
}

fn plan_from_parts(grid: InterpolationGrid, n: usize, beta: f64) -> Result<InterpolationPlan> {
    let heads = grid.p / (n - 2);
    let eps0 = leakage(heads, n, beta, grid.delta);
    let interpolation = (grid.b - grid.a) / ((n - 2) * heads) as f64;
    let m_v = grid.a.abs().max(grid.b.abs());
    let plan = InterpolationPlan {
        n,
        heads,
        beta,
        eps0,
        interpolation,
        bound: m_v * eps0 + interpolation,
        grid,
    };
    check_score_guard(&plan)?;
    Ok(plan)
}

fn check_score_guard(plan: &InterpolationPlan) -> Result<()> {
    let g = &plan.grid;
    let s_max = 2.0 * g.a.abs().max(g.b.abs());
    let k_max = (g.p + 1) as f64;
    let ell_max = k_max * 2.0 * (g.a.abs().max(g.b.abs()) + g.delta);
    let magnitude = plan.beta * (2.0 * k_max * s_max + ell_max);
    if magnitude > SCORE_MAGNITUDE_GUARD {
        return Err(Error::Infeasible {
            reason: format!("pre-shift scores reach {magnitude:.3e} (guard {SCORE_MAGNITUDE_GUARD:.0e})"),
            smallest_eps: plan.bound * (magnitude / SCORE_MAGNITUDE_GUARD).sqrt(),
        });
    }
    Ok(())
}

/// The `H` heads of the construction, acting on `[X; W_s; I_n]`
/// (`3d + n` rows) and writing a single output row.
pub fn truncated_linear_heads(d: usize, grid: &InterpolationGrid, n: usize, beta: f64, offset: f64) -> Result<Vec<AttentionHead>> {
    if n < 3 {
        return Err(Error::Domain("the truncated-linear construction needs n >= 3 tokens".into()));
    }
    if grid.p % (n - 2) != 0 {
        return Err(Error::Domain(format!("grid size {} is not a multiple of n-2 = {}", grid.p, n - 2)));
    }
    let heads = grid.p / (n - 2);
    let width = 3 * d + n;
    let mut w_q = Matrix::zeros(d + 1, width);
    for r in 0..d {
        w_q.set(r, r, 1.0);
    }
    for j in 0..n {
        w_q.set(d, 3 * d + j, 1.0);
    }
    let mut out = Vec::with_capacity(heads);
    for h in 1..=heads {
        let first = ((h - 1) * (n - 2)) as i64 - 1;
        let mut w_k = Matrix::zeros(d + 1, width);
        for r in 0..d {
            w_k.set(r, d + r, 2.0);
            w_k.set(r, 2 * d + r, 2.0 * first as f64);
        }
        let mut w_v = Matrix::zeros(1, width);
        for j in 0..n {
            let k = first + j as i64;
            // Shifting s by t adds 2kt to every score of slot k.
            w_k.set(d, 3 * d + j, -grid.ell(k) + 2.0 * k as f64 * offset);
            let value = if j == 0 {
                if h == 1 { grid.a } else { 0.0 }
            } else if j == n - 1 {
                if h == heads { grid.b } else { 0.0 }
            } else {
                grid.value(k)
            };
            w_v.set(0, 3 * d + j, value);
        }
        out.push(AttentionHead::new(w_k, w_q.clone(), w_v, None, beta)?);
    }
    Ok(out)
}

/// The in-context coefficient layout `W_s = [0·w … (n−1)·w; w … w]` (`2d x n`).
pub fn coefficient_layout(w_s: &Matrix, n: usize) -> Result<Matrix> {
    if w_s.cols() != 1 {
        return Err(Error::Shape {
            op: "coefficient_layout",
            left: w_s.shape(),
            right: (w_s.rows(), 1),
        });
    }
    let d = w_s.rows();
    Ok(Matrix::from_fn(2 * d, n, |r, c| {
        if r < d {
            c as f64 * w_s.get(r, 0)
        } else {
            w_s.get(r - d, 0)
        }
    }))
}

/// A multi-head layer that maps each token `x_i` to `Range_[a,b](w_sᵀx_i + t)`
/// on output row `k_g`.
#[derive(Clone, Debug)]
pub struct TruncatedLinearApproximator {
    /// `W_s` for the coefficient this approximator was built with.
    pub weights: Matrix,
    /// The layer, with the lift `X ↦ [X; W_s; I_n]` as its group prefix.
    pub attention: MultiHeadAttention,
    pub plan: InterpolationPlan,
    pub target_row: usize,
    pub offset: f64,
    /// Grid size before rounding up to a multiple of `n − 2`, if it was rounded.
    pub padded_from: Option<usize>,
}

/// Build the approximator for coefficient `w_s` (`d x 1`) on `grid` with `n`
/// tokens, writing to row `k_g` of a `d_o`-row output.
pub fn build_truncated_linear(
    w_s: &Matrix,
    grid: &InterpolationGrid,
    n: usize,
    beta: f64,
    k_g: usize,
    d_o: usize,
) -> Result<TruncatedLinearApproximator> {
    build_truncated_linear_with_offset(w_s, grid, n, beta, k_g, d_o, 0.0)
}

pub fn build_truncated_linear_with_offset(
    w_s: &Matrix,
    grid: &InterpolationGrid,
    n: usize,
    beta: f64,
    k_g: usize,
    d_o: usize,
    offset: f64,
) -> Result<TruncatedLinearApproximator> {
    if n < 3 {
        return Err(Error::Domain("the truncated-linear construction needs n >= 3 tokens".into()));
    }
    if k_g >= d_o {
        return Err(Error::Index { index: k_g, len: d_o });
    }
    let (grid, padded_from) = if grid.p % (n - 2) == 0 {
        (grid.clone(), None)
    } else {
        (grid.padded_to_multiple(n - 2)?, Some(grid.p))
    };
    let d = w_s.rows();
    let weights = coefficient_layout(w_s, n)?;
    let heads = truncated_linear_heads(d, &grid, n, beta, offset)?;
    let plan = plan_from_parts(grid, n, beta)?;

    let mut lift = Matrix::zeros(3 * d + n, d);
    for r in 0..d {
        lift.set(r, r, 1.0);
    }
    let mut bias = Matrix::zeros(3 * d + n, n);
    bias.set_block(d, 0, &weights)?;
    bias.set_block(3 * d, 0, &Matrix::identity(n))?;
    let prefix = LinearConnection {
        terms: vec![crate::attention::LinearTerm { left: lift, right: None }],
        bias: Some(bias),
    };
    let attention = MultiHeadAttention::new(
        vec![HeadGroup {
            prefix: Some(prefix),
            heads: heads.into(),
            row_offset: k_g,
        }],
        d_o,
    )?;
    Ok(TruncatedLinearApproximator {
        weights,
        attention,
        plan,
        target_row: k_g,
        offset,
        padded_from,
    })
}

impl TruncatedLinearApproximator {
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.plan.n {
            return Err(Error::Shape {
                op: "TruncatedLinearApproximator::forward",
                left: x.shape(),
                right: (x.rows(), self.plan.n),
            });
        }
        forward_multi(&self.attention, x)
    }

    /// Certified per-entry bound `max(|a|,|b|)·eps0 + (b−a)/((n−2)H)`.
    pub fn bound(&self) -> f64 {
        self.plan.bound
    }

    /// Exact clamped targets on the output row, for comparison.
    pub fn reference(&self, x: &Matrix) -> Result<Matrix> {
        let d = self.weights.rows() / 2;
        let g = &self.plan.grid;
        let mut out = Matrix::zeros(self.attention.out_dim, x.cols());
        for i in 0..x.cols() {
            let s: f64 = (0..d).map(|r| self.weights.get(d + r, 0) * x.get(r, i)).sum::<f64>() + self.offset;
            out.set(self.target_row, i, range_clamp(s, g.a, g.b)?);
        }
        Ok(out)
    }
}

/// Largest `|entry|` outside row `row`.
pub fn off_row_magnitude(y: &Matrix, row: usize) -> f64 {
    let mut y = y.clone();
    for c in 0..y.cols() {
        y.set(row, c, 0.0);
    }
    sup_norm(&y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{softmax_cols, sup_norm_diff};

    #[test]
    fn clamp_cases() {
        assert_eq!(range_clamp(-5.0, 0.0, 1.0).unwrap(), 0.0);
        assert_eq!(range_clamp(0.5, 0.0, 1.0).unwrap(), 0.5);
        assert_eq!(range_clamp(7.0, 0.0, 1.0).unwrap(), 1.0);
        assert!(range_clamp(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn grids() {
        let g = make_grid(0.0, 1.0, 4).unwrap();
        assert_eq!(g.points, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(g.delta, 0.25);
        assert_eq!(make_grid(-1.0, 1.0, 2).unwrap().points, vec![-1.0, 0.0, 1.0]);
        assert!(make_grid(1.0, 1.0, 3).is_err());
        assert!(make_grid(0.0, 1.0, 0).is_err());
    }

    #[test]
    fn hardmax_beta_formula() {
        let plan = plan_hardmax_beta(3, 1.0, 0.01, HardmaxCase::UniqueMax).unwrap();
        assert!((plan.beta_min - 200f64.ln()).abs() < 1e-12);
        let x = Matrix::column(&[1.0, 0.0, -0.5]);
        let s = softmax_cols(&x, plan.beta_min).unwrap();
        assert!(sup_norm_diff(&s, &Matrix::column(&[1.0, 0.0, 0.0])).unwrap() <= 0.01);

        let two = plan_hardmax_beta(2, 0.5, 0.1, HardmaxCase::UniqueMax).unwrap();
        assert!((two.beta_min - (-(0.1f64).ln() / 0.5)).abs() < 1e-12);
        let wide = plan_hardmax_beta(5, 2.0, 0.1, HardmaxCase::UniqueMax).unwrap();
        let narrow = plan_hardmax_beta(5, 1.0, 0.1, HardmaxCase::UniqueMax).unwrap();
        assert!((narrow.beta_min - 2.0 * wide.beta_min).abs() < 1e-12);
        assert!(plan_hardmax_beta(3, 0.0, 0.1, HardmaxCase::UniqueMax).is_err());
        assert!(plan_hardmax_beta(2, 1.0, 0.1, HardmaxCase::TwoLargest).is_err());
    }

    #[test]
    fn head_case_center_and_outside() {
        let g = make_grid(0.0, 1.0, 12).unwrap();
        // n = 5: three interior slots per head, four heads.
        let centre = g.value(4);
        assert_eq!(classify_head_case(centre, 2, &g, 5).unwrap(), HeadCase::Case1);
        assert_eq!(classify_head_case(centre, 4, &g, 5).unwrap(), HeadCase::Case2);
        assert_eq!(classify_head_case(-10.0, 1, &g, 5).unwrap(), HeadCase::Case2);
        assert!(classify_head_case(0.5, 5, &g, 5).is_err());
    }

    #[test]
    fn padding_rounds_grid_up() {
        let g = make_grid(-1.0, 1.0, 7).unwrap();
        let w = Matrix::column(&[0.5]);
        let approx = build_truncated_linear(&w, &g, 5, 50.0, 0, 1).unwrap();
        assert_eq!(approx.plan.grid.p, 9);
        assert_eq!(approx.padded_from, Some(7));
    }

    #[test]
    fn zero_coefficient_maps_to_zero() {
        let g = make_grid(-1.0, 1.0, 60).unwrap();
        let plan = plan_with_heads(-1.0, 1.0, 6, 15, 1e-3).unwrap();
        let approx = build_truncated_linear(&Matrix::column(&[0.0, 0.0]), &g, 6, plan.beta, 1, 2).unwrap();
        let x = Matrix::from_fn(2, 6, |r, c| ((r + 2 * c) as f64).sin());
        let y = approx.forward(&x).unwrap();
        for c in 0..6 {
            assert!(y.get(1, c).abs() <= approx.bound());
            assert_eq!(y.get(0, c), 0.0);
        }
    }

    #[test]
    fn scalar_coefficient_reproduces_input() {
        let plan = plan_with_heads(-1.0, 1.0, 8, 64 / 6 + 1, 1e-4).unwrap();
        let approx = build_truncated_linear(&Matrix::column(&[1.0]), &plan.grid, 8, plan.beta, 0, 1).unwrap();
        let x = Matrix::row_vector(&[0.3, -0.9, 0.0, 1.5, -3.0, 0.99, 0.123, -0.5]);
        let y = approx.forward(&x).unwrap();
        let err = sup_norm_diff(&y, &approx.reference(&x).unwrap()).unwrap();
        assert!(err <= approx.bound(), "{err} > {}", approx.bound());
    }

    #[test]
    fn offset_shifts_the_clamped_value() {
        let plan = plan_with_heads(-1.0, 1.0, 4, 40, 1e-4).unwrap();
        let approx =
            build_truncated_linear_with_offset(&Matrix::column(&[1.0]), &plan.grid, 4, plan.beta, 0, 1, 0.25).unwrap();
        let x = Matrix::row_vector(&[0.0, 0.5, -0.5, 0.9]);
        let y = approx.forward(&x).unwrap();
        let expect = [0.25, 0.75, -0.25, 1.0];
        for (c, e) in expect.iter().enumerate() {
            assert!((y.get(0, c) - e).abs() <= approx.bound());
        }
    }

    #[test]
    fn rejects_two_tokens() {
        let g = make_grid(0.0, 1.0, 4).unwrap();
        assert!(build_truncated_linear(&Matrix::column(&[1.0]), &g, 2, 1.0, 0, 1).is_err());
    }
}
