//! The algorithms the frozen networks emulate, with direct reference oracles.
//!
//! The workhorse is the *f-map emulator*: one attention head behind a
//! sequence-wise linear connection that maps a regression prompt with tokens
//! `(x_i; y_i; w)` to the columns `f(wᵀx_c − y_c)·x_c`. With
//! `f = −η ∇ℓ` the mean of those columns is one gradient-descent step, so
//! repeated application of the same frozen layer runs GD in-context.
//!
//! Layout of the connection's output (`2d + 2 + n` rows). Each prompt token
//! `i` is expanded into `P + 1` key tokens `(i, r)`, one per grid level `L_r`,
//! followed by `n` query tokens:
//!
//! | rows          | key `(i, r)`     | query `c` |
//! |---------------|------------------|-----------|
//! | `0..d`        | `2 L_r x_i`      | `w`       |
//! | `d`           | `2 L_r y_i`      | `−1`      |
//! | `d+1..2d+1`   | `f(L_r) x_i`     | `0`       |
//! | `2d+1`        | `−L_r²`          | `1`       |
//! | `2d+2..`      | `(C/β) e_i`      | `e_c`     |
//!
//! With `W_K = W_Q = I` the score of key `(i, r)` for query `c` is
//! `−(u_i − L_r)² + u_i² + (C/β)[i = c]` where `u_i = wᵀx_i − y_i`, so at
//! temperature `β` the selector constant `C` confines attention to token `c`
//! and the Gaussian `exp(−β (u_c − L_r)²)` concentrates it on the levels
//! nearest `u_c`. `W_V` reads the `f(L_r) x_i` rows; `W_O` keeps the query
//! columns.

use serde::{Deserialize, Serialize};

use crate::attention::{forward_head, AttentionHead, LinearConnection, LinearTerm};
use crate::emulator::TargetHead;
use crate::error::{Error, Result};
use crate::grid::{make_grid, InterpolationGrid};
use crate::linalg::{dot, norm2, sup_norm, Matrix};
use crate::prompt::encode_gd_input;

/// A regression pair `(x_i, y_i)`.
pub type Pair = (Vec<f64>, f64);

/// The scalar shapes shipped with the library.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseFn {
    Tanh,
    Identity,
    /// `u ↦ u`, the derivative of `½u²`.
    SquareGrad,
    Zero,
}

/// `u ↦ scale · base(u)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarFn {
    pub base: BaseFn,
    pub scale: f64,
}

impl ScalarFn {
    pub fn tanh() -> Self {
        Self { base: BaseFn::Tanh, scale: 1.0 }
    }

    pub fn identity() -> Self {
        Self { base: BaseFn::Identity, scale: 1.0 }
    }

    pub fn square_grad() -> Self {
        Self { base: BaseFn::SquareGrad, scale: 1.0 }
    }

    pub fn zero() -> Self {
        Self { base: BaseFn::Zero, scale: 0.0 }
    }

    pub fn scaled(self, s: f64) -> Self {
        Self { base: self.base, scale: self.scale * s }
    }

    pub fn eval(&self, u: f64) -> f64 {
        let v = match self.base {
            BaseFn::Tanh => u.tanh(),
            BaseFn::Identity | BaseFn::SquareGrad => u,
            BaseFn::Zero => 0.0,
        };
        self.scale * v
    }

    pub fn lipschitz(&self) -> f64 {
        match self.base {
            BaseFn::Zero => 0.0,
            _ => self.scale.abs(),
        }
    }

    /// `(slope, intercept)` when the function is affine.
    pub fn affine(&self) -> Option<(f64, f64)> {
        match self.base {
            BaseFn::Tanh => None,
            BaseFn::Identity | BaseFn::SquareGrad => Some((self.scale, 0.0)),
            BaseFn::Zero => Some((0.0, 0.0)),
        }
    }

    /// `sup |f|` on `[a, b]` (every shipped shape is monotone).
    pub fn sup_on(&self, a: f64, b: f64) -> f64 {
        self.eval(a).abs().max(self.eval(b).abs())
    }
}

/// Per-sample losses `ℓ(u)`, `u = wᵀx − y`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// `½u²`.
    Squared,
    /// `ln cosh u`, whose derivative is `tanh u`.
    LogCosh,
}

impl Loss {
    pub fn value(&self, u: f64) -> f64 {
        match self {
            Loss::Squared => 0.5 * u * u,
            Loss::LogCosh => {
                let a = u.abs();
                a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
            }
        }
    }

    pub fn grad(&self) -> ScalarFn {
        match self {
            Loss::Squared => ScalarFn::square_grad(),
            Loss::LogCosh => ScalarFn::tanh(),
        }
    }
}

fn check_pairs(pairs: &[Pair], d: usize) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Domain("at least one pair is required".into()));
    }
    for (x, y) in pairs {
        if x.len() != d {
            return Err(Error::Shape {
                op: "regression pairs",
                left: (x.len(), 1),
                right: (d, 1),
            });
        }
        if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("regression pairs"));
        }
    }
    Ok(())
}

/// Residual `u_i = wᵀx_i − y_i`.
pub fn residual(pair: &Pair, w: &[f64]) -> f64 {
    dot(&pair.0, w) - pair.1
}

/// `d x n` matrix of `∇ℓ(wᵀx_i − y_i)·x_i`.
pub fn per_sample_gradients(pairs: &[Pair], w: &[f64], loss_grad: &ScalarFn) -> Result<Matrix> {
    check_pairs(pairs, w.len())?;
    Ok(Matrix::from_fn(w.len(), pairs.len(), |r, c| {
        loss_grad.eval(residual(&pairs[c], w)) * pairs[c].0[r]
    }))
}

/// Direct evaluation of `f(wᵀx_c − y_c)·x_c` for every token.
pub fn f_map_oracle(pairs: &[Pair], w: &[f64], f: &ScalarFn) -> Result<Matrix> {
    per_sample_gradients(pairs, w, f)
}

/// Mean empirical loss `(1/n) Σ ℓ(u_i) + (λ/2)‖w‖²`.
pub fn empirical_loss(pairs: &[Pair], w: &[f64], loss: Loss, lambda: f64) -> f64 {
    let n = pairs.len() as f64;
    pairs.iter().map(|p| loss.value(residual(p, w))).sum::<f64>() / n + 0.5 * lambda * dot(w, w)
}

/// One exact GD step `w − η ((1/n) Σ ∇ℓ(u_i) x_i + λ w)`.
pub fn gd_step(pairs: &[Pair], w: &[f64], eta: f64, loss: Loss, lambda: f64) -> Result<Vec<f64>> {
    if !(eta > 0.0) {
        return Err(Error::Domain(format!("learning rate must be positive, got {eta}")));
    }
    let g = per_sample_gradients(pairs, w, &loss.grad())?;
    let n = pairs.len() as f64;
    Ok((0..w.len())
        .map(|r| w[r] - eta * (g.row(r).iter().sum::<f64>() / n + lambda * w[r]))
        .collect())
}

/// Iterates and losses of a GD run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GDTrace {
    pub iterates: Vec<Vec<f64>>,
    pub loss_values: Vec<f64>,
    pub eta: f64,
}

/// Exact multi-step GD.
pub fn gd_multi(pairs: &[Pair], w0: &[f64], eta: f64, loss: Loss, lambda: f64, steps: usize) -> Result<GDTrace> {
    let mut iterates = vec![w0.to_vec()];
    let mut loss_values = vec![empirical_loss(pairs, w0, loss, lambda)];
    for _ in 0..steps {
        let next = gd_step(pairs, iterates.last().unwrap(), eta, loss, lambda)?;
        loss_values.push(empirical_loss(pairs, &next, loss, lambda));
        iterates.push(next);
    }
    Ok(GDTrace { iterates, loss_values, eta })
}

// ---------------------------------------------------------------------------
// f-map emulator

/// How the grid error of an f-map emulator is certified.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FPlanMode {
    /// Generic `f`: modulus of continuity on spacing `ΔL` plus far-level mass.
    Modulus,
    /// Affine `f`: only the centroid bias of the lattice Gaussian matters.
    Affine,
}

/// Input magnitudes an f-map emulator is planned for.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FBounds {
    /// `max |x_i entry|`.
    pub b_x: f64,
    /// `max |u_i|`, `u_i = wᵀx_i − y_i`.
    pub u_max: f64,
    /// `max ‖w‖₂²`.
    pub w_norm_sq: f64,
}

impl FBounds {
    /// The bounds realised by one prompt.
    pub fn measure(pairs: &[Pair], w: &[f64]) -> Self {
        Self {
            b_x: pairs.iter().flat_map(|p| p.0.iter()).fold(0.0f64, |m, v| m.max(v.abs())),
            u_max: pairs.iter().fold(0.0f64, |m, p| m.max(residual(p, w).abs())),
            w_norm_sq: dot(w, w),
        }
    }

    /// Bounds valid for every `w` with `‖w‖₂ ≤ w_norm` on fixed data.
    pub fn for_iterates(pairs: &[Pair], w_norm: f64) -> Self {
        let x_norm = pairs.iter().fold(0.0f64, |m, p| m.max(norm2(&p.0)));
        let y_max = pairs.iter().fold(0.0f64, |m, p| m.max(p.1.abs()));
        Self {
            b_x: pairs.iter().flat_map(|p| p.0.iter()).fold(0.0f64, |m, v| m.max(v.abs())),
            u_max: w_norm * x_norm + y_max,
            w_norm_sq: w_norm * w_norm,
        }
    }

    /// Whether `other` lies inside these bounds, up to rounding (a norm
    /// bound squared need not reproduce the squared norm exactly).
    pub fn covers(&self, other: &FBounds) -> bool {
        let within = |v: f64, limit: f64| v <= limit * (1.0 + 1e-12);
        within(other.b_x, self.b_x) && within(other.u_max, self.u_max) && within(other.w_norm_sq, self.w_norm_sq)
    }
}

/// Grid, temperatures and certified bound of an f-map emulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FPlan {
    pub mode: FPlanMode,
    pub grid: InterpolationGrid,
    pub beta: f64,
    /// Selector constant `C` (added to the scaled score of the own token).
    pub selector: f64,
    /// Mass allowed on other tokens.
    pub eps_m: f64,
    pub bounds: FBounds,
    /// `sup |f|` over the grid.
    pub b_f: f64,
    /// Certified per-entry error.
    pub bound: f64,
}

/// Selector constant making the off-token mass at most `eps_m`.
///
/// Off-token keys score at most `β·max(u_max², ‖w‖² + 3)` (the latter for
/// query tokens, which also act as keys); the own token's best level scores
/// at least `C − βΔL²/4`; there are `(n−1)(P+1) + n` competitors.
pub fn selector_constant(beta: f64, bounds: &FBounds, delta: f64, n: usize, p: usize, eps_m: f64) -> f64 {
    let others = ((n - 1) * (p + 1) + n) as f64;
    beta * (bounds.u_max * bounds.u_max).max(bounds.w_norm_sq + 3.0) + beta * delta * delta / 4.0 + (others / eps_m).ln()
}

/// Centroid bias of `exp(−(t − u)²/(2σ²))` sampled on a lattice of spacing
/// `Δ` with `ρ = σ²/Δ²`, from Poisson summation:
/// `Δ·4πρ Σ k e^{−2π²ρk²} / (1 − 2 Σ e^{−2π²ρk²})`.
pub fn lattice_centroid_bias(delta: f64, rho: f64) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 1..=50 {
        let e = (-2.0 * std::f64::consts::PI.powi(2) * rho * (k * k) as f64).exp();
        num += k as f64 * e;
        den += e;
    }
    delta * 4.0 * std::f64::consts::PI * rho * num / (1.0 - 2.0 * den)
}

/// Extra centroid shift from cutting the lattice `pad` levels beyond every
/// reachable `u`: removed mass times its distance, over the kept mass
/// (at least `e^{−1/(8ρ)}` from the nearest level).
pub fn lattice_truncation_bias(delta: f64, rho: f64, pad: usize) -> f64 {
    let mut moment = 0.0;
    let mut mass = 0.0;
    for j in pad..pad + 200 {
        let e = (-((j * j) as f64) / (2.0 * rho)).exp();
        moment += (j + 1) as f64 * delta * e;
        mass += e;
    }
    let kept = (-1.0 / (8.0 * rho)).exp();
    2.0 * (moment + mass * delta) / kept
}

/// Grid levels beyond `±u_max` used by the affine planner.
pub const AFFINE_PAD_LEVELS: usize = 12;

/// Plan an f-map emulator for affine `f` with target per-entry error `eps`.
///
/// Uses `ρ = σ²/Δ² = 1` (`β = 1/(2Δ²)`): the Gaussian weights then average
/// to `u_c` up to [`lattice_centroid_bias`], so the spacing is free and is
/// set to give `levels` levels across `[−u_max, u_max]`.
pub fn plan_f_affine(f: &ScalarFn, bounds: FBounds, n: usize, eps: f64, levels: usize) -> Result<FPlan> {
    let (slope, _) = f
        .affine()
        .ok_or_else(|| Error::Domain("the affine planner needs an affine f".into()))?;
    check_eps(eps)?;
    let u_max = bounds.u_max.max(1e-6);
    let inner = levels.max(2);
    let delta = 2.0 * u_max / inner as f64;
    let pad = AFFINE_PAD_LEVELS as f64 * delta;
    let p = inner + 2 * AFFINE_PAD_LEVELS;
    let grid = make_grid(-u_max - pad, u_max + pad, p)?;
    let rho = 1.0;
    let beta = 1.0 / (2.0 * rho * grid.delta * grid.delta);
    let b_x = bounds.b_x.max(f64::MIN_POSITIVE);
    let b_f = f.sup_on(grid.a, grid.b).max(f64::MIN_POSITIVE);
    let eps_m = (eps / (4.0 * b_f * b_x)).min(0.5);
    let selector = selector_constant(beta, &bounds, grid.delta, n, p, eps_m);
    let centroid = lattice_centroid_bias(grid.delta, rho) + lattice_truncation_bias(grid.delta, rho, AFFINE_PAD_LEVELS);
    let bound = slope.abs() * b_x * centroid + 2.0 * b_f * b_x * eps_m;
    Ok(FPlan {
        mode: FPlanMode::Affine,
        grid,
        beta,
        selector,
        eps_m,
        bounds,
        b_f,
        bound,
    })
}

/// Plan an f-map emulator for any `f` with Lipschitz constant
/// `f.lipschitz()`, target per-entry error `eps`:
/// `B·(ω(ΔL) + 2B_f τ) + 2B_f B ε_m` with `τ = (P+1)e^{−¾βΔL²}`, split
/// `eps/2`, `eps/4`, `eps/4`.
pub fn plan_f_modulus(f: &ScalarFn, bounds: FBounds, n: usize, eps: f64) -> Result<FPlan> {
    check_eps(eps)?;
    // Plan a hair inside the target so rounding cannot push the bound over it.
    let eps = eps * (1.0 - 1e-9);
    let u_max = bounds.u_max.max(1e-6);
    let b_x = bounds.b_x.max(f64::MIN_POSITIVE);
    let lip = f.lipschitz().max(f64::MIN_POSITIVE);
    let target_delta = eps / (2.0 * b_x * lip);
    // One extra level on each side keeps every u strictly inside the grid.
    let inner = ((2.0 * u_max / target_delta).ceil() as usize).max(1);
    let p = inner + 2;
    let delta0 = 2.0 * u_max / inner as f64;
    let grid = make_grid(-u_max - delta0, u_max + delta0, p)?;
    let delta = grid.delta;
    let b_f = f.sup_on(grid.a, grid.b).max(f64::MIN_POSITIVE);
    let beta = 4.0 / (3.0 * delta * delta) * (8.0 * b_x * b_f * (p + 1) as f64 / eps).ln().max(1.0);
    let eps_m = (eps / (8.0 * b_f * b_x)).min(0.5);
    let selector = selector_constant(beta, &bounds, delta, n, p, eps_m);
    let tau = (p + 1) as f64 * (-0.75 * beta * delta * delta).exp();
    let bound = b_x * (lip * delta + 2.0 * b_f * tau) + 2.0 * b_f * b_x * eps_m;
    Ok(FPlan {
        mode: FPlanMode::Modulus,
        grid,
        beta,
        selector,
        eps_m,
        bounds,
        b_f,
        bound,
    })
}

/// Pick the affine planner when `f` is affine, the modulus planner otherwise.
pub fn plan_f(f: &ScalarFn, bounds: FBounds, n: usize, eps: f64) -> Result<FPlan> {
    if f.affine().is_some() {
        plan_f_affine(f, bounds, n, eps, 64)
    } else {
        plan_f_modulus(f, bounds, n, eps)
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Domain(format!("eps must be positive and finite, got {eps}")));
    }
    Ok(())
}

/// Largest `|f(s) − f(t)|` over sampled pairs with `|s − t| ≤ h` on `[a, b]`.
pub fn sampled_modulus(f: impl Fn(f64) -> f64, a: f64, b: f64, h: f64, samples: usize) -> f64 {
    let samples = samples.max(2);
    let step = (b - a) / (samples - 1) as f64;
    let mut worst = 0.0f64;
    for i in 0..samples {
        let s = a + i as f64 * step;
        for t in [s + h, s + h / 2.0] {
            if t <= b {
                worst = worst.max((f(s) - f(t)).abs());
            }
        }
    }
    worst
}

/// Check a Lipschitz claim by sampling; a violation means the grid is too coarse.
pub fn verify_modulus(f: &ScalarFn, plan: &FPlan) -> Result<()> {
    let h = plan.grid.delta;
    let sampled = sampled_modulus(|u| f.eval(u), plan.grid.a, plan.grid.b, h, 4096);
    let claimed = f.lipschitz() * h * (1.0 + 1e-9) + 1e-15;
    if sampled > claimed {
        return Err(Error::ReplanRequired(format!(
            "sampled modulus {sampled:.3e} exceeds the planned {claimed:.3e} at spacing {h:.3e}"
        )));
    }
    Ok(())
}

/// A frozen single-head f-map emulator for `d`-dimensional data and `n` tokens.
#[derive(Clone, Debug)]
pub struct FEmulator {
    pub linear: LinearConnection,
    pub head: AttentionHead,
    pub plan: FPlan,
    pub f: ScalarFn,
    pub d: usize,
    pub n: usize,
}

/// Assemble the linear connection and head for `f` on the plan's grid.
pub fn build_f_emulator(f: &ScalarFn, plan: FPlan, d: usize, n: usize) -> Result<FEmulator> {
    if n == 0 || d == 0 {
        return Err(Error::Domain("the f-map emulator needs d, n >= 1".into()));
    }
    let levels = &plan.grid.points;
    let p1 = levels.len();
    let keys = n * p1;
    let tokens = keys + n;
    let rows = 2 * d + 2 + n;
    let in_rows = 2 * d + 1;

    // Token-mixing factors: data token i feeds key tokens (i, ·) with weight
    // 2L_r or f(L_r), and query token i (its copy of w).
    let two_l = Matrix::from_fn(n, tokens, |i, t| if t < keys && t / p1 == i { 2.0 * levels[t % p1] } else { 0.0 });
    let f_l = Matrix::from_fn(n, tokens, |i, t| if t < keys && t / p1 == i { f.eval(levels[t % p1]) } else { 0.0 });
    let to_query = Matrix::from_fn(n, tokens, |i, t| if t == keys + i { 1.0 } else { 0.0 });

    let select = |dst: usize, src: usize, count: usize| {
        Matrix::from_fn(rows, in_rows, |r, c| if r >= dst && r < dst + count && c == src + (r - dst) { 1.0 } else { 0.0 })
    };
    let mut bias = Matrix::zeros(rows, tokens);
    let sel = plan.selector / plan.beta;
    for t in 0..tokens {
        if t < keys {
            let l = levels[t % p1];
            bias.set(2 * d + 1, t, -l * l);
            bias.set(2 * d + 2 + t / p1, t, sel);
        } else {
            bias.set(d, t, -1.0);
            bias.set(2 * d + 1, t, 1.0);
            bias.set(2 * d + 2 + (t - keys), t, 1.0);
        }
    }
    let linear = LinearConnection {
        terms: vec![
            LinearTerm { left: select(0, 0, d + 1), right: Some(two_l) },
            LinearTerm { left: select(d + 1, 0, d), right: Some(f_l) },
            LinearTerm { left: select(0, d + 1, d), right: Some(to_query) },
        ],
        bias: Some(bias),
    };
    let w_v = Matrix::from_fn(d, rows, |r, c| if c == d + 1 + r { 1.0 } else { 0.0 });
    let w_o = Matrix::from_fn(tokens, n, |t, c| if t == keys + c { 1.0 } else { 0.0 });
    let head = AttentionHead::new(Matrix::identity(rows), Matrix::identity(rows), w_v, Some(w_o), plan.beta)?;
    Ok(FEmulator {
        linear,
        head,
        plan,
        f: *f,
        d,
        n,
    })
}

impl FEmulator {
    /// `d x n` approximation of `f(wᵀx_c − y_c)·x_c` on a GD prompt `Z`.
    pub fn forward(&self, z: &Matrix) -> Result<Matrix> {
        if z.shape() != (2 * self.d + 1, self.n) {
            return Err(Error::Shape {
                op: "FEmulator::forward",
                left: z.shape(),
                right: (2 * self.d + 1, self.n),
            });
        }
        forward_head(&self.head, &self.linear.apply(z)?)
    }

    /// Forward on pairs and `w`, refusing prompts outside the planned bounds.
    pub fn apply(&self, pairs: &[Pair], w: &[f64]) -> Result<Matrix> {
        let measured = FBounds::measure(pairs, w);
        if !self.plan.bounds.covers(&measured) {
            return Err(Error::ReplanRequired(format!(
                "prompt bounds {measured:?} exceed the planned {:?}",
                self.plan.bounds
            )));
        }
        self.forward(&encode_gd_input(pairs, w)?.matrix()?)
    }
}

/// Plan and build an f-map emulator for one prompt.
pub fn f_emulator_for(f: &ScalarFn, pairs: &[Pair], w: &[f64], eps: f64) -> Result<FEmulator> {
    check_pairs(pairs, w.len())?;
    let plan = plan_f(f, FBounds::measure(pairs, w), pairs.len(), eps)?;
    build_f_emulator(f, plan, w.len(), pairs.len())
}

/// Emulated per-sample gradients `∇ℓ(u_i)·x_i` within `eps`.
pub fn per_sample_gradients_emulated(pairs: &[Pair], w: &[f64], loss: Loss, eps: f64) -> Result<Matrix> {
    f_emulator_for(&loss.grad(), pairs, w, eps)?.apply(pairs, w)
}

/// A frozen GD layer: `ŵ = (1 − ηλ) w + (1/n) Σ_c out_c` with the attention
/// computing `out_c ≈ −η ∇ℓ(u_c) x_c`.
#[derive(Clone, Debug)]
pub struct GdLayer {
    pub emulator: FEmulator,
    pub eta: f64,
    pub lambda: f64,
}

impl GdLayer {
    /// Plan a layer valid for all iterates with `‖w‖₂ ≤ w_norm` on `pairs`,
    /// with per-entry step error at most `eps`.
    pub fn plan(pairs: &[Pair], loss: Loss, eta: f64, lambda: f64, w_norm: f64, eps: f64) -> Result<Self> {
        if !(eta > 0.0) {
            return Err(Error::Domain(format!("learning rate must be positive, got {eta}")));
        }
        let d = pairs.first().map(|p| p.0.len()).ok_or_else(|| Error::Domain("no pairs".into()))?;
        check_pairs(pairs, d)?;
        let f = loss.grad().scaled(-eta);
        let plan = plan_f(&f, FBounds::for_iterates(pairs, w_norm), pairs.len(), eps)?;
        Ok(Self {
            emulator: build_f_emulator(&f, plan, d, pairs.len())?,
            eta,
            lambda,
        })
    }

    pub fn step(&self, pairs: &[Pair], w: &[f64]) -> Result<Vec<f64>> {
        let out = self.emulator.apply(pairs, w)?;
        let n = pairs.len() as f64;
        Ok((0..w.len())
            .map(|r| (1.0 - self.eta * self.lambda) * w[r] + out.row(r).iter().sum::<f64>() / n)
            .collect())
    }

    /// Per-entry error of one step (the mean of per-token errors).
    pub fn step_bound(&self) -> f64 {
        self.emulator.plan.bound
    }

    /// Apply the same frozen layer `steps` times.
    pub fn run(&self, pairs: &[Pair], w0: &[f64], loss: Loss, steps: usize) -> Result<GDTrace> {
        let mut iterates = vec![w0.to_vec()];
        let mut loss_values = vec![empirical_loss(pairs, w0, loss, self.lambda)];
        for _ in 0..steps {
            let next = self.step(pairs, iterates.last().unwrap())?;
            loss_values.push(empirical_loss(pairs, &next, loss, self.lambda));
            iterates.push(next);
        }
        Ok(GDTrace {
            iterates,
            loss_values,
            eta: self.eta,
        })
    }
}

/// One emulated GD step planned for this prompt (`‖ŵ − w⁺‖∞ ≤ eps`).
pub fn gd_step_emulated(pairs: &[Pair], w: &[f64], eta: f64, loss: Loss, eps: f64) -> Result<Vec<f64>> {
    GdLayer::plan(pairs, loss, eta, 0.0, norm2(w), eps)?.step(pairs, w)
}

// ---------------------------------------------------------------------------
// Linear algebra for the regression oracles

/// `X` (`d x n`) and `y` from pairs.
pub fn design(pairs: &[Pair]) -> Result<(Matrix, Vec<f64>)> {
    let d = pairs.first().map(|p| p.0.len()).ok_or_else(|| Error::Domain("no pairs".into()))?;
    check_pairs(pairs, d)?;
    let x = Matrix::from_fn(d, pairs.len(), |r, c| pairs[c].0[r]);
    Ok((x, pairs.iter().map(|p| p.1).collect()))
}

/// Solve `A z = b` by Gaussian elimination with partial pivoting.
pub fn solve(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n || b.len() != n {
        return Err(Error::Shape {
            op: "solve",
            left: a.shape(),
            right: (b.len(), 1),
        });
    }
    let scale = sup_norm(a).max(f64::MIN_POSITIVE);
    let mut m = a.clone();
    let mut rhs = b.to_vec();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m.get(i, col).abs().total_cmp(&m.get(j, col).abs()))
            .unwrap();
        if m.get(pivot, col).abs() <= 1e-12 * scale {
            return Err(Error::Singular(format!("pivot {col} vanishes (rank deficient)")));
        }
        if pivot != col {
            for c in 0..n {
                let t = m.get(col, c);
                m.set(col, c, m.get(pivot, c));
                m.set(pivot, c, t);
            }
            rhs.swap(col, pivot);
        }
        for r in col + 1..n {
            let factor = m.get(r, col) / m.get(col, col);
            if factor != 0.0 {
                for c in col..n {
                    m.set(r, c, m.get(r, c) - factor * m.get(col, c));
                }
                rhs[r] -= factor * rhs[col];
            }
        }
    }
    let mut z = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| m.get(r, c) * z[c]).sum();
        z[r] = (rhs[r] - s) / m.get(r, r);
    }
    Ok(z)
}

fn gram(pairs: &[Pair]) -> Result<(Matrix, Vec<f64>)> {
    let (x, y) = design(pairs)?;
    let g = x.matmul(&x.transpose())?;
    let xy = (0..x.rows()).map(|r| dot(x.row(r), &y)).collect();
    Ok((g, xy))
}

/// Least squares `argmin ½ Σ (wᵀx_i − y_i)²`.
pub fn linear_regression(pairs: &[Pair]) -> Result<Vec<f64>> {
    let (g, xy) = gram(pairs)?;
    solve(&g, &xy)
}

/// Ridge `argmin ½ Σ (wᵀx_i − y_i)² + (λ/2)‖w‖²`.
pub fn ridge_regression(pairs: &[Pair], lambda: f64) -> Result<Vec<f64>> {
    if !(lambda >= 0.0) {
        return Err(Error::Domain(format!("ridge penalty must be non-negative, got {lambda}")));
    }
    let (mut g, xy) = gram(pairs)?;
    for i in 0..g.rows() {
        g.set(i, i, g.get(i, i) + lambda);
    }
    solve(&g, &xy)
}

/// Gradient `Σ (wᵀx_i − y_i) x_i + λ w` of the ridge objective.
pub fn ridge_gradient(pairs: &[Pair], w: &[f64], lambda: f64) -> Vec<f64> {
    let mut g: Vec<f64> = w.iter().map(|v| lambda * v).collect();
    for p in pairs {
        let u = residual(p, w);
        for (gi, xi) in g.iter_mut().zip(&p.0) {
            *gi += u * xi;
        }
    }
    g
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
pub fn power_iteration(a: &Matrix, tol: f64, max_iter: usize) -> Result<f64> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Shape {
            op: "power_iteration",
            left: a.shape(),
            right: (n, n),
        });
    }
    if n == 0 {
        return Ok(0.0);
    }
    // A fixed irregular start vector, unlikely to be orthogonal to the top eigenvector.
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.37 * ((i as f64 + 1.0) * 1.618).sin()).collect();
    let mut lambda = 0.0;
    for it in 0..max_iter {
        let norm = norm2(&v);
        if norm == 0.0 {
            return Ok(0.0);
        }
        v.iter_mut().for_each(|x| *x /= norm);
        let av: Vec<f64> = (0..n).map(|r| dot(a.row(r), &v)).collect();
        let next = dot(&v, &av);
        if it > 0 && (next - lambda).abs() <= tol * next.abs().max(1e-300) {
            return Ok(next);
        }
        lambda = next;
        v = av;
    }
    Ok(lambda)
}

/// Curvature of the mean squared loss `(1/n) Σ ½u² + (λ'/2)‖w‖²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curvature {
    /// Smoothness `L_f` (largest eigenvalue of `XXᵀ/n`, plus `λ'`).
    pub smooth: f64,
    /// Strong convexity `μ` (smallest eigenvalue, plus `λ'`).
    pub strong: f64,
}

impl Curvature {
    pub fn kappa(&self) -> f64 {
        self.smooth / self.strong
    }
}

/// Safety factor applied to power-iteration eigenvalue estimates.
pub const CURVATURE_MARGIN: f64 = 0.01;

/// Estimate `L_f` and `μ` of the mean objective with penalty `lambda_mean`
/// (both by power iteration, the latter on `L·I − XXᵀ/n`), widened by
/// [`CURVATURE_MARGIN`] in the safe direction.
pub fn curvature(pairs: &[Pair], lambda_mean: f64) -> Result<Curvature> {
    let (g, _) = gram(pairs)?;
    let g = g.scale(1.0 / pairs.len() as f64);
    let top = power_iteration(&g, 1e-13, 200_000)?;
    let shifted = Matrix::from_fn(g.rows(), g.cols(), |r, c| if r == c { top - g.get(r, c) } else { -g.get(r, c) });
    let bottom = (top - power_iteration(&shifted, 1e-13, 200_000)?).max(0.0);
    Ok(Curvature {
        smooth: top * (1.0 + CURVATURE_MARGIN) + lambda_mean,
        strong: bottom * (1.0 - CURVATURE_MARGIN) + lambda_mean,
    })
}

/// Everything chosen when emulating a regression solver by GD.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionPlan {
    pub eps: f64,
    /// Penalty of the summed objective (`0` for least squares).
    pub lambda: f64,
    pub curvature: Curvature,
    /// `1/L_f`.
    pub eta: f64,
    pub steps: usize,
    /// Per-entry error allowed for one emulated step.
    pub step_eps: f64,
    /// `‖w*‖₂` bound `‖(1/n) X y‖₂ / μ`.
    pub w_star_bound: f64,
    /// Iterate norm bound the layer is planned for (`2‖w*‖ + 1`).
    pub w_norm: f64,
}

/// Plan GD from `w⁰ = 0`: `eps/2` to GD-vs-optimum via
/// `‖wᵗ − w*‖² ≤ e^{−t/κ}‖w*‖²`, `eps/2` to emulation via the per-step
/// composition `‖ŵᵗ − wᵗ‖₂ ≤ t·√d·step_eps`.
pub fn plan_regression(pairs: &[Pair], lambda: f64, eps: f64) -> Result<RegressionPlan> {
    check_eps(eps)?;
    let (_, xy) = gram(pairs)?;
    let n = pairs.len() as f64;
    let d = xy.len();
    let lambda_mean = lambda / n;
    let curvature = curvature(pairs, lambda_mean)?;
    if !(curvature.strong > 0.0) {
        return Err(Error::Singular("the objective is not strongly convex".into()));
    }
    let w_star_bound = norm2(&xy) / n / curvature.strong;
    let ratio = w_star_bound * w_star_bound / (eps / 2.0).powi(2);
    let steps = if ratio <= 1.0 { 1 } else { (curvature.kappa() * ratio.ln()).ceil() as usize };
    let step_eps = eps / (2.0 * steps as f64 * (d as f64).sqrt());
    Ok(RegressionPlan {
        eps,
        lambda,
        curvature,
        eta: 1.0 / curvature.smooth,
        steps,
        step_eps,
        w_star_bound,
        w_norm: 2.0 * w_star_bound + 1.0,
    })
}

/// Result of an emulated regression.
#[derive(Clone, Debug)]
pub struct EmulatedRegression {
    pub w: Vec<f64>,
    pub plan: RegressionPlan,
    pub trace: GDTrace,
    pub layer: GdLayer,
}

/// Least squares (`lambda = 0`) or ridge by repeated application of one
/// frozen GD layer.
pub fn regression_emulated(pairs: &[Pair], lambda: f64, eps: f64) -> Result<EmulatedRegression> {
    let plan = plan_regression(pairs, lambda, eps)?;
    let n = pairs.len() as f64;
    let layer = GdLayer::plan(pairs, Loss::Squared, plan.eta, lambda / n, plan.w_norm, plan.step_eps)?;
    let d = pairs[0].0.len();
    let trace = layer.run(pairs, &vec![0.0; d], Loss::Squared, plan.steps)?;
    Ok(EmulatedRegression {
        w: trace.iterates.last().unwrap().clone(),
        plan,
        trace,
        layer,
    })
}

/// Lasso `argmin ½ Σ (wᵀx_i − y_i)² + λ₁‖w‖₁` by proximal gradient (ISTA)
/// with step `1/λ_max(XXᵀ)`, stopped when the gradient-mapping residual
/// drops to `1e-8`.
pub fn lasso_oracle(pairs: &[Pair], lambda_l1: f64) -> Result<Vec<f64>> {
    const TOL: f64 = 1e-8;
    const MAX_ITER: usize = 2_000_000;
    if !(lambda_l1 >= 0.0) {
        return Err(Error::Domain(format!("l1 penalty must be non-negative, got {lambda_l1}")));
    }
    let (g, xy) = gram(pairs)?;
    let lip = power_iteration(&g, 1e-13, 200_000)? * (1.0 + CURVATURE_MARGIN);
    if lip == 0.0 {
        return Ok(vec![0.0; xy.len()]);
    }
    let step = 1.0 / lip;
    let soft = |v: f64, t: f64| v.signum() * (v.abs() - t).max(0.0);
    let mut w = vec![0.0; xy.len()];
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_ITER {
        let grad: Vec<f64> = (0..w.len()).map(|r| dot(g.row(r), &w) - xy[r]).collect();
        let next: Vec<f64> = w
            .iter()
            .zip(&grad)
            .map(|(wi, gi)| soft(wi - step * gi, step * lambda_l1))
            .collect();
        residual = next.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) * lip;
        w = next;
        if residual <= TOL {
            return Ok(w);
        }
    }
    Err(Error::NoConvergence {
        iterations: MAX_ITER,
        residual,
    })
}

// ---------------------------------------------------------------------------
// Algorithm specs

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmKind {
    FMap,
    GdStep,
    GdMulti,
    LinearReg,
    RidgeReg,
    LassoOracle,
    TargetHead,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(rename = "L", default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f: Option<BaseFn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<TargetHead>,
}

/// One member of an algorithm library: `{kind, params{eta?, lambda?, L?, f?, weights?}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub kind: AlgorithmKind,
    #[serde(default)]
    pub params: AlgorithmParams,
}

/// What an oracle is evaluated on.
#[derive(Clone, Debug)]
pub enum OracleInput<'a> {
    /// Token matrix for attention-head targets.
    Tokens(&'a Matrix),
    /// Regression pairs with the current (or initial) coefficient.
    Pairs { pairs: &'a [Pair], w: &'a [f64] },
}

impl AlgorithmSpec {
    pub fn target_head(&self) -> Result<TargetHead> {
        match (&self.kind, &self.params.weights) {
            (AlgorithmKind::TargetHead, Some(t)) => Ok(t.clone()),
            (AlgorithmKind::TargetHead, None) => Err(Error::Domain("target_head spec without weights".into())),
            (k, _) => Err(Error::Domain(format!("{k:?} is not expressed as a single attention head"))),
        }
    }

    pub fn display_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| format!("{:?}", self.kind))
    }

    fn scalar_fn(&self) -> ScalarFn {
        let base = self.params.f.unwrap_or(BaseFn::SquareGrad);
        ScalarFn { base, scale: if base == BaseFn::Zero { 0.0 } else { 1.0 } }
    }

    fn loss(&self) -> Loss {
        match self.params.f {
            Some(BaseFn::Tanh) => Loss::LogCosh,
            _ => Loss::Squared,
        }
    }

    /// Direct (non-attention) evaluation. Regression kinds return `w` as a
    /// `d x 1` column; `f_map` returns the `d x n` columns; target heads the
    /// head output.
    pub fn oracle(&self, input: OracleInput<'_>) -> Result<Matrix> {
        let need = |v: Option<f64>, what: &str| v.ok_or_else(|| Error::Domain(format!("{:?} needs {what}", self.kind)));
        match (self.kind, input) {
            (AlgorithmKind::TargetHead, OracleInput::Tokens(x)) => self.target_head()?.forward(x),
            (AlgorithmKind::FMap, OracleInput::Pairs { pairs, w }) => f_map_oracle(pairs, w, &self.scalar_fn()),
            (AlgorithmKind::GdStep, OracleInput::Pairs { pairs, w }) => {
                let eta = need(self.params.eta, "eta")?;
                let lambda = self.params.lambda.unwrap_or(0.0);
                Ok(Matrix::column(&gd_step(pairs, w, eta, self.loss(), lambda)?))
            }
            (AlgorithmKind::GdMulti, OracleInput::Pairs { pairs, w }) => {
                let eta = need(self.params.eta, "eta")?;
                let steps = self.params.steps.ok_or_else(|| Error::Domain("gd_multi needs L".into()))?;
                let trace = gd_multi(pairs, w, eta, self.loss(), self.params.lambda.unwrap_or(0.0), steps)?;
                Ok(Matrix::column(trace.iterates.last().unwrap()))
            }
            (AlgorithmKind::LinearReg, OracleInput::Pairs { pairs, .. }) => Ok(Matrix::column(&linear_regression(pairs)?)),
            (AlgorithmKind::RidgeReg, OracleInput::Pairs { pairs, .. }) => {
                Ok(Matrix::column(&ridge_regression(pairs, need(self.params.lambda, "lambda")?)?))
            }
            (AlgorithmKind::LassoOracle, OracleInput::Pairs { pairs, .. }) => {
                Ok(Matrix::column(&lasso_oracle(pairs, need(self.params.lambda, "lambda")?)?))
            }
            (kind, _) => Err(Error::Domain(format!("{kind:?} cannot be evaluated on this input"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs_2d() -> Vec<Pair> {
        vec![
            (vec![0.9, -0.2], 0.4),
            (vec![-0.3, 0.7], -0.1),
            (vec![0.5, 0.5], 0.8),
            (vec![-0.8, -0.4], -0.6),
            (vec![0.1, -0.9], 0.2),
        ]
    }

    #[test]
    fn squared_gradient_single_pair() {
        let g = per_sample_gradients(&[(vec![1.0, 0.0], 1.0)], &[0.0, 0.0], &ScalarFn::square_grad()).unwrap();
        assert_eq!(g.data(), &[-1.0, 0.0]);
        let w = gd_step(&[(vec![1.0, 0.0], 1.0)], &[0.0, 0.0], 0.1, Loss::Squared, 0.0).unwrap();
        assert!((w[0] - 0.1).abs() < 1e-15 && w[1] == 0.0);
    }

    #[test]
    fn ridge_identity_design() {
        let pairs = vec![(vec![1.0, 0.0], 1.0), (vec![0.0, 1.0], 1.0)];
        assert_eq!(ridge_regression(&pairs, 1.0).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn linear_regression_rejects_rank_deficiency() {
        let pairs = vec![(vec![1.0, 2.0], 1.0), (vec![2.0, 4.0], 2.0)];
        assert!(matches!(linear_regression(&pairs), Err(Error::Singular(_))));
    }

    #[test]
    fn lasso_soft_threshold() {
        let w = lasso_oracle(&[(vec![1.0], 1.0)], 0.5).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-8);
        assert_eq!(lasso_oracle(&pairs_2d(), 1e6).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn f_emulator_identity_scalar() {
        let pairs = vec![(vec![0.4], 0.0), (vec![0.4], 0.0), (vec![0.4], 0.0)];
        let emu = f_emulator_for(&ScalarFn::identity(), &pairs, &[1.0], 1e-6).unwrap();
        let out = emu.apply(&pairs, &[1.0]).unwrap();
        for c in 0..3 {
            assert!((out.get(0, c) - 0.16).abs() <= 1e-6, "{out:?}");
        }
    }

    #[test]
    fn f_emulator_tanh_within_plan() {
        let pairs = pairs_2d();
        let w = [0.3, -0.6];
        let emu = f_emulator_for(&ScalarFn::tanh(), &pairs, &w, 0.02).unwrap();
        verify_modulus(&emu.f, &emu.plan).unwrap();
        let out = emu.apply(&pairs, &w).unwrap();
        let exact = f_map_oracle(&pairs, &w, &ScalarFn::tanh()).unwrap();
        let err = crate::linalg::sup_norm_diff(&out, &exact).unwrap();
        assert!(err <= emu.plan.bound && emu.plan.bound <= 0.02, "{err} {}", emu.plan.bound);
    }

    #[test]
    fn zero_f_gives_zero() {
        let pairs = pairs_2d();
        let emu = f_emulator_for(&ScalarFn::zero(), &pairs, &[0.1, 0.2], 0.01).unwrap();
        assert_eq!(sup_norm(&emu.apply(&pairs, &[0.1, 0.2]).unwrap()), 0.0);
    }

    #[test]
    fn emulated_regression_hits_closed_form() {
        let pairs = pairs_2d();
        let result = regression_emulated(&pairs, 0.0, 1e-3).unwrap();
        let exact = linear_regression(&pairs).unwrap();
        let err = result.w.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-3, "{err}");
    }

    #[test]
    fn spec_json_round_trip() {
        let json = r#"{"kind":"gd_multi","params":{"eta":0.1,"L":3,"f":"tanh"}}"#;
        let spec: AlgorithmSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.params.steps, Some(3));
        assert_eq!(spec.loss(), Loss::LogCosh);
        let back: AlgorithmSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
    }
}
