//! Modern Hopfield layers and their in-context constructions.
//!
//! A layer stores patterns `Y` and retrieves
//! `W_V W_K Y · Softmax_β((W_K Y)ᵀ W_Q R)` for state patterns `R`. The
//! stored side is materialised at build time as `keys = W_K Y` and
//! `values = W_V W_K Y`; the constructions below write those matrices
//! directly.

use crate::algorithms::{residual, FPlan, Pair, ScalarFn};
use crate::attention::{HeadFile, LayerFile};
use crate::error::{Error, Result};
use crate::grid::{make_grid, InterpolationGrid};
use crate::linalg::{matmul, softmax_cols, Matrix};

/// Tag used in the layer JSON.
pub const HOPFIELD_KIND: &str = "hopfield";

#[derive(Clone, Debug, PartialEq)]
pub struct HopfieldLayer {
    /// `W_K Y` (`d x N`).
    pub keys: Matrix,
    /// `W_V W_K Y` (`d_v x N`).
    pub values: Matrix,
    /// `W_Q` (`d x d_r`).
    pub w_q: Matrix,
    pub beta: f64,
}

impl HopfieldLayer {
    /// From raw stored patterns `Y` (`d_y x N`) and projections
    /// `W_Q (d x d_r)`, `W_K (d x d_y)`, `W_V (d_v x d)`.
    pub fn new(y: &Matrix, w_q: Matrix, w_k: &Matrix, w_v: &Matrix, beta: f64) -> Result<Self> {
        if w_k.cols() != y.rows() {
            return Err(Error::Weight {
                name: "W_K",
                got: w_k.shape(),
                expected: format!("(_, {})", y.rows()),
            });
        }
        if w_q.rows() != w_k.rows() {
            return Err(Error::Weight {
                name: "W_Q",
                got: w_q.shape(),
                expected: format!("({}, _)", w_k.rows()),
            });
        }
        if w_v.cols() != w_k.rows() {
            return Err(Error::Weight {
                name: "W_V",
                got: w_v.shape(),
                expected: format!("(_, {})", w_k.rows()),
            });
        }
        let keys = matmul(w_k, y)?;
        let values = matmul(w_v, &keys)?;
        Self::from_parts(keys, values, w_q, beta)
    }

    pub fn from_parts(keys: Matrix, values: Matrix, w_q: Matrix, beta: f64) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::Domain(format!("beta must be positive and finite, got {beta}")));
        }
        if keys.cols() != values.cols() || w_q.rows() != keys.rows() {
            return Err(Error::Shape {
                op: "HopfieldLayer",
                left: keys.shape(),
                right: values.shape(),
            });
        }
        Ok(Self { keys, values, w_q, beta })
    }

    /// Retrieval weights `Softmax_β(keysᵀ W_Q R)` (`N x S`).
    pub fn weights(&self, r: &Matrix) -> Result<Matrix> {
        if r.rows() != self.w_q.cols() {
            return Err(Error::Shape {
                op: "hopfield_forward",
                left: self.w_q.shape(),
                right: r.shape(),
            });
        }
        let scores = matmul(&self.keys.transpose(), &matmul(&self.w_q, r)?)?;
        softmax_cols(&scores, self.beta)
    }

    pub fn to_layer_file(&self) -> LayerFile {
        LayerFile {
            beta: self.beta,
            heads: vec![HeadFile {
                w_k: self.keys.clone(),
                w_q: self.w_q.clone(),
                w_v: self.values.clone(),
                w_o: None,
                beta: None,
            }],
            kind: Some(HOPFIELD_KIND.to_string()),
        }
    }

    /// Inverse of [`HopfieldLayer::to_layer_file`]: `W_K` holds the keys and
    /// `W_V` the values.
    pub fn from_layer_file(file: &LayerFile) -> Result<Self> {
        if file.kind.as_deref() != Some(HOPFIELD_KIND) {
            return Err(Error::Parse(format!("expected kind \"{HOPFIELD_KIND}\", got {:?}", file.kind)));
        }
        let head = match file.heads.as_slice() {
            [h] => h,
            _ => return Err(Error::Parse("a Hopfield layer file holds exactly one head".into())),
        };
        Self::from_parts(head.w_k.clone(), head.w_v.clone(), head.w_q.clone(), head.beta.unwrap_or(file.beta))
    }
}

/// `values · Softmax_β(keysᵀ W_Q R)` (`d_v x S`).
pub fn hopfield_forward(layer: &HopfieldLayer, r: &Matrix) -> Result<Matrix> {
    matmul(&layer.values, &layer.weights(r)?)
}

/// Planned grid and temperature for approximating `f(aᵀz + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HopfieldApproxPlan {
    pub grid: InterpolationGrid,
    pub beta: f64,
    /// Off-neighbour mass `ε₁ = (P+1)·e^{−¾βΔL²}`.
    pub eps1: f64,
    /// Modulus term `ε₂ = Lip·ΔL`.
    pub eps2: f64,
    pub b_f: f64,
    /// `ε₁·2B_f + ε₂`.
    pub bound: f64,
}

/// Plan for `f` (componentwise scalar functions) on `l(z) ∈ [lo, hi]` with
/// target error `eps`, split evenly between the two terms.
pub fn plan_hopfield_approx(fs: &[ScalarFn], lo: f64, hi: f64, eps: f64) -> Result<HopfieldApproxPlan> {
    if !(eps > 0.0) || !(lo < hi) {
        return Err(Error::Domain(format!("need eps > 0 and lo < hi, got {eps}, [{lo}, {hi}]")));
    }
    let eps = eps * (1.0 - 1e-9);
    let lip = fs.iter().map(ScalarFn::lipschitz).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let b_f = fs.iter().map(|f| f.sup_on(lo, hi)).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let p = (((hi - lo) * 2.0 * lip / eps).ceil() as usize).max(1);
    let grid = make_grid(lo, hi, p)?;
    let delta = grid.delta;
    let beta = 4.0 / (3.0 * delta * delta) * (4.0 * b_f * (p + 1) as f64 / eps).ln().max(1.0);
    let eps1 = (p + 1) as f64 * (-0.75 * beta * delta * delta).exp();
    let eps2 = lip * delta;
    Ok(HopfieldApproxPlan {
        grid,
        beta,
        eps1,
        eps2,
        b_f,
        bound: eps1 * 2.0 * b_f + eps2,
    })
}

/// Hopfield layer mapping state `R = [Z; 1]` to columns `f(aᵀz_c + b)`:
/// keys `(2L_i a; 2L_i b − L_i²)`, values `f(L_i)`, `W_Q = I`.
pub fn build_hopfield_function_approx(a: &[f64], b: f64, fs: &[ScalarFn], grid: &InterpolationGrid, beta: f64) -> Result<HopfieldLayer> {
    if fs.is_empty() {
        return Err(Error::Domain("need at least one output function".into()));
    }
    let dz = a.len();
    let levels = &grid.points;
    let keys = Matrix::from_fn(dz + 1, levels.len(), |r, i| {
        let l = levels[i];
        if r < dz {
            2.0 * l * a[r]
        } else {
            2.0 * l * b - l * l
        }
    });
    let values = Matrix::from_fn(fs.len(), levels.len(), |o, i| fs[o].eval(levels[i]));
    HopfieldLayer::from_parts(keys, values, Matrix::identity(dz + 1), beta)
}

/// State patterns `[Z; 1]` for [`build_hopfield_function_approx`].
pub fn function_approx_state(z: &Matrix) -> Matrix {
    Matrix::from_fn(z.rows() + 1, z.cols(), |r, c| if r < z.rows() { z.get(r, c) } else { 1.0 })
}

/// Check the planned modulus against a sampled one.
pub fn verify_hopfield_modulus(fs: &[ScalarFn], plan: &HopfieldApproxPlan) -> Result<()> {
    for f in fs {
        let sampled = crate::algorithms::sampled_modulus(|u| f.eval(u), plan.grid.a, plan.grid.b, plan.grid.delta, 4096);
        if sampled > plan.eps2 * (1.0 + 1e-9) + 1e-15 {
            return Err(Error::ReplanRequired(format!(
                "sampled modulus {sampled:.3e} exceeds the planned {:.3e}",
                plan.eps2
            )));
        }
    }
    Ok(())
}

/// Hopfield layer computing `f(wᵀx_c − y_c)·x_c` from stored patterns built
/// out of the data. Keys come only from the `P + 1` per-token blocks
/// `(2L_r x_i; 2L_r y_i; −L_r²; (C/β) e_i)` with values `f(L_r) x_i`; state
/// pattern `c` is `(w; −1; 1; e_c)`. Returns the layer and the states.
pub fn build_hopfield_gd(pairs: &[Pair], w: &[f64], f: &ScalarFn, plan: &FPlan) -> Result<(HopfieldLayer, Matrix)> {
    let d = w.len();
    let n = pairs.len();
    if n == 0 || pairs.iter().any(|p| p.0.len() != d) {
        return Err(Error::Domain("pairs must be non-empty and match w".into()));
    }
    let levels = &plan.grid.points;
    let p1 = levels.len();
    let rows = d + 2 + n;
    let sel = plan.selector / plan.beta;
    let keys = Matrix::from_fn(rows, n * p1, |r, t| {
        let (i, l) = (t / p1, levels[t % p1]);
        match r {
            r if r < d => 2.0 * l * pairs[i].0[r],
            r if r == d => 2.0 * l * pairs[i].1,
            r if r == d + 1 => -l * l,
            r => {
                if r - d - 2 == i {
                    sel
                } else {
                    0.0
                }
            }
        }
    });
    let values = Matrix::from_fn(d, n * p1, |r, t| f.eval(levels[t % p1]) * pairs[t / p1].0[r]);
    let state = Matrix::from_fn(rows, n, |r, c| match r {
        r if r < d => w[r],
        r if r == d => -1.0,
        r if r == d + 1 => 1.0,
        r => {
            if r - d - 2 == c {
                1.0
            } else {
                0.0
            }
        }
    });
    Ok((HopfieldLayer::from_parts(keys, values, Matrix::identity(rows), plan.beta)?, state))
}

/// Largest `|u_i|` on a prompt, for planning.
pub fn max_residual(pairs: &[Pair], w: &[f64]) -> f64 {
    pairs.iter().map(|p| residual(p, w).abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithms::{f_map_oracle, plan_f, FBounds};
    use crate::linalg::sup_norm_diff;

    #[test]
    fn single_pattern_returns_its_value() {
        let y = Matrix::column(&[0.3, -0.2]);
        let w_k = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0]]).unwrap();
        let w_v = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let layer = HopfieldLayer::new(&y, Matrix::identity(2), &w_k, &w_v, 3.0).unwrap();
        let r = Matrix::from_fn(2, 4, |i, j| (i + j) as f64);
        let out = hopfield_forward(&layer, &r).unwrap();
        let expect = matmul(&w_v, &matmul(&w_k, &y).unwrap()).unwrap().get(0, 0);
        assert!(out.data().iter().all(|&v| (v - expect).abs() < 1e-15));
    }

    #[test]
    fn identity_approximation() {
        let plan = plan_hopfield_approx(&[ScalarFn::identity()], -1.0, 1.0, 1e-3).unwrap();
        let layer = build_hopfield_function_approx(&[1.0], 0.0, &[ScalarFn::identity()], &plan.grid, plan.beta).unwrap();
        let out = hopfield_forward(&layer, &function_approx_state(&Matrix::row_vector(&[0.3]))).unwrap();
        assert!((out.get(0, 0) - 0.3).abs() <= plan.bound);
    }

    #[test]
    fn gd_construction_matches_oracle() {
        let pairs = vec![(vec![0.5, -0.3], 0.2), (vec![-0.1, 0.8], -0.4), (vec![0.7, 0.7], 0.1)];
        let w = [0.4, 0.2];
        let f = ScalarFn::tanh();
        let plan = plan_f(&f, FBounds::measure(&pairs, &w), pairs.len(), 0.01).unwrap();
        let (layer, state) = build_hopfield_gd(&pairs, &w, &f, &plan).unwrap();
        let out = hopfield_forward(&layer, &state).unwrap();
        let err = sup_norm_diff(&out, &f_map_oracle(&pairs, &w, &f).unwrap()).unwrap();
        assert!(err <= plan.bound, "{err} > {}", plan.bound);
    }

    #[test]
    fn layer_file_round_trip() {
        let layer = build_hopfield_function_approx(&[1.0, -0.5], 0.1, &[ScalarFn::tanh()], &make_grid(-1.0, 1.0, 4).unwrap(), 5.0).unwrap();
        let json = serde_json::to_string(&layer.to_layer_file()).unwrap();
        let back: LayerFile = serde_json::from_str(&json).unwrap();
        assert_eq!(HopfieldLayer::from_layer_file(&back).unwrap(), layer);
    }
}
