//! Prompt encodings: the ways an algorithm's parameters are packed into the
//! input tokens of a frozen network, together with exact decoders.
//!
//! * [`Layout::WeightTokens`] — `X_p = [X; W; I_n]` where `W` stacks `j·w` over `w`
//!   in token `j`, and `w = [vec(W_K); vec(W_Q); vec(W_V)]` (row-major).
//! * [`Layout::GdInput`] — `Z = [x_i; y_i; w]` per token for in-context
//!   regression.
//! * [`Layout::RowStack`] — `[X; W_Kᵀ; W_Qᵀ; W_Vᵀ]`, zero-padded to a
//!   common token width.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matmul, stack_rows, unvec, vec, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    WeightTokens,
    GdInput,
    RowStack,
}

/// Relative widening applied to measured inner-product ranges.
pub const BOUNDS_MARGIN: f64 = 0.05;

/// Dimensions and planning statistics recorded alongside a prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptMeta {
    pub d: usize,
    pub n: usize,
    /// Rows of `W_K` and `W_Q`.
    pub d_h: usize,
    /// Rows of `W_V`.
    pub d_o: usize,
    /// Token width of the encoded block (differs from `n` only for row stacks).
    pub width: usize,
    /// Widened range of every `k_jᵀx_i`, `q_jᵀx_i`, `v_jᵀx_i` (all groups).
    pub bounds: Option<(f64, f64)>,
    /// The same per group: keys, queries, values.
    pub group_bounds: Option<[(f64, f64); 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptEncoding {
    /// Data block: `d x n` for target prompts, `(d+1) x n` of `(x_i; y_i)` for GD prompts.
    pub x: Matrix,
    /// Weight block in the layout's format.
    pub w: Matrix,
    /// Materialised positional block `I_n`, when the layout carries one.
    pub position_block: Option<Matrix>,
    pub layout: Layout,
    pub meta: PromptMeta,
}

impl PromptEncoding {
    /// The full input matrix fed to a network.
    pub fn matrix(&self) -> Result<Matrix> {
        match &self.position_block {
            Some(p) => stack_rows(&[&self.x, &self.w, p]),
            None => stack_rows(&[&self.x, &self.w]),
        }
    }
}

fn check_target(x: &Matrix, w_k: &Matrix, w_q: &Matrix, w_v: &Matrix) -> Result<()> {
    let d = x.rows();
    if w_k.cols() != d || w_q.shape() != w_k.shape() || w_v.cols() != d {
        return Err(Error::Shape {
            op: "target head weights",
            left: w_k.shape(),
            right: w_v.shape(),
        });
    }
    Ok(())
}

/// Widened `[min, max]` of the entries of the given products.
pub fn widened_range(products: &[&Matrix]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for m in products {
        for &v in m.data() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() {
        return (-1e-3, 1e-3);
    }
    let margin = BOUNDS_MARGIN * lo.abs().max(hi.abs()).max(1e-3);
    (lo - margin, hi + margin)
}

fn target_meta(x: &Matrix, w_k: &Matrix, w_q: &Matrix, w_v: &Matrix, width: usize) -> Result<PromptMeta> {
    let k = matmul(w_k, x)?;
    let q = matmul(w_q, x)?;
    let v = matmul(w_v, x)?;
    Ok(PromptMeta {
        d: x.rows(),
        n: x.cols(),
        d_h: w_k.rows(),
        d_o: w_v.rows(),
        width,
        bounds: Some(widened_range(&[&k, &q, &v])),
        group_bounds: Some([widened_range(&[&k]), widened_range(&[&q]), widened_range(&[&v])]),
    })
}

/// `w = [vec(W_K); vec(W_Q); vec(W_V)]`.
pub fn flatten_target(w_k: &Matrix, w_q: &Matrix, w_v: &Matrix) -> Result<Matrix> {
    stack_rows(&[&vec(w_k), &vec(w_q), &vec(w_v)])
}

/// Encode a target head and its input `X` in the weight-in-token layout.
pub fn encode_target_head(x: &Matrix, w_k: &Matrix, w_q: &Matrix, w_v: &Matrix) -> Result<PromptEncoding> {
    check_target(x, w_k, w_q, w_v)?;
    let n = x.cols();
    if n < 3 {
        return Err(Error::Domain(format!("weight-in-token prompts need n >= 3 tokens, got {n}")));
    }
    let w = flatten_target(w_k, w_q, w_v)?;
    let len = w.rows();
    let block = Matrix::from_fn(2 * len, n, |r, c| {
        if r < len {
            c as f64 * w.get(r, 0)
        } else {
            w.get(r - len, 0)
        }
    });
    Ok(PromptEncoding {
        x: x.clone(),
        w: block,
        position_block: Some(Matrix::identity(n)),
        layout: Layout::WeightTokens,
        meta: target_meta(x, w_k, w_q, w_v, n)?,
    })
}

/// Recover `(X, W_K, W_Q, W_V)` from a weight-in-token or row-stack prompt.
pub fn decode_target_head(p: &PromptEncoding) -> Result<(Matrix, Matrix, Matrix, Matrix)> {
    let PromptMeta { d, n, d_h, d_o, .. } = p.meta;
    match p.layout {
        Layout::WeightTokens => {
            let len = (2 * d_h + d_o) * d;
            if p.w.rows() != 2 * len {
                return Err(Error::Shape {
                    op: "decode_target_head",
                    left: p.w.shape(),
                    right: (2 * len, n),
                });
            }
            let w = p.w.row_block(len, 2 * len)?.col_block(0, 1)?;
            let k = unvec(&w.row_block(0, d_h * d)?, d_h, d)?;
            let q = unvec(&w.row_block(d_h * d, 2 * d_h * d)?, d_h, d)?;
            let v = unvec(&w.row_block(2 * d_h * d, len)?, d_o, d)?;
            Ok((p.x.clone(), k, q, v))
        }
        Layout::RowStack => {
            let x = p.x.col_block(0, n)?;
            let k = p.w.row_block(0, d)?.col_block(0, d_h)?.transpose();
            let q = p.w.row_block(d, 2 * d)?.col_block(0, d_h)?.transpose();
            let v = p.w.row_block(2 * d, 3 * d)?.col_block(0, d_o)?.transpose();
            Ok((x, k, q, v))
        }
        Layout::GdInput => Err(Error::Domain("a GD prompt does not encode a target head".into())),
    }
}

/// Encode regression pairs and a coefficient: token `i` is `(x_i; y_i; w)`.
pub fn encode_gd_input(pairs: &[(Vec<f64>, f64)], w: &[f64]) -> Result<PromptEncoding> {
    let d = w.len();
    if pairs.is_empty() {
        return Err(Error::Domain("GD prompts need at least one pair".into()));
    }
    if let Some((i, _)) = pairs.iter().enumerate().find(|(_, (x, _))| x.len() != d) {
        return Err(Error::Shape {
            op: "encode_gd_input",
            left: (pairs[i].0.len(), 1),
            right: (d, 1),
        });
    }
    let n = pairs.len();
    let x = Matrix::from_fn(d + 1, n, |r, c| if r < d { pairs[c].0[r] } else { pairs[c].1 });
    let wb = Matrix::from_fn(d, n, |r, _| w[r]);
    Ok(PromptEncoding {
        x,
        w: wb,
        position_block: None,
        layout: Layout::GdInput,
        meta: PromptMeta {
            d,
            n,
            d_h: 0,
            d_o: 0,
            width: n,
            bounds: None,
            group_bounds: None,
        },
    })
}

/// Recover the pairs and coefficient of a GD prompt.
pub fn decode_gd_input(p: &PromptEncoding) -> Result<(Vec<(Vec<f64>, f64)>, Vec<f64>)> {
    if p.layout != Layout::GdInput {
        return Err(Error::Domain("not a GD prompt".into()));
    }
    let d = p.meta.d;
    let pairs = (0..p.meta.n)
        .map(|c| ((0..d).map(|r| p.x.get(r, c)).collect(), p.x.get(d, c)))
        .collect();
    Ok((pairs, p.w.col(0)))
}

/// Encode a target head as the row stack `[X; W_Kᵀ; W_Qᵀ; W_Vᵀ]`, zero-padding
/// every block to width `max(n, d_h, d_o)`.
pub fn encode_rowstack(x: &Matrix, w_k: &Matrix, w_q: &Matrix, w_v: &Matrix) -> Result<PromptEncoding> {
    check_target(x, w_k, w_q, w_v)?;
    let (d, n) = x.shape();
    let width = n.max(w_k.rows()).max(w_v.rows());
    let pad = |m: &Matrix| {
        let mut out = Matrix::zeros(m.rows(), width);
        out.set_block(0, 0, m).map(|_| out)
    };
    let w = stack_rows(&[&pad(&w_k.transpose())?, &pad(&w_q.transpose())?, &pad(&w_v.transpose())?])?;
    debug_assert_eq!(w.rows(), 3 * d);
    Ok(PromptEncoding {
        x: pad(x)?,
        w,
        position_block: None,
        layout: Layout::RowStack,
        meta: target_meta(x, w_k, w_q, w_v, width)?,
    })
}

/// On-disk prompt: `{layout, X, W_K, W_Q, W_V | w, pairs, meta}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PromptFile {
    pub layout: Layout,
    #[serde(rename = "X", default, skip_serializing_if = "Option::is_none")]
    pub x: Option<Matrix>,
    #[serde(rename = "W_K", default, skip_serializing_if = "Option::is_none")]
    pub w_k: Option<Matrix>,
    #[serde(rename = "W_Q", default, skip_serializing_if = "Option::is_none")]
    pub w_q: Option<Matrix>,
    #[serde(rename = "W_V", default, skip_serializing_if = "Option::is_none")]
    pub w_v: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairs: Option<Vec<(Vec<f64>, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<PromptMeta>,
}

impl PromptFile {
    pub fn from_encoding(p: &PromptEncoding) -> Result<Self> {
        let mut file = PromptFile {
            layout: p.layout,
            x: None,
            w_k: None,
            w_q: None,
            w_v: None,
            w: None,
            pairs: None,
            meta: Some(p.meta.clone()),
        };
        match p.layout {
            Layout::GdInput => {
                let (pairs, w) = decode_gd_input(p)?;
                file.pairs = Some(pairs);
                file.w = Some(w);
            }
            _ => {
                let (x, k, q, v) = decode_target_head(p)?;
                file.x = Some(x);
                file.w_k = Some(k);
                file.w_q = Some(q);
                file.w_v = Some(v);
            }
        }
        Ok(file)
    }

    pub fn to_encoding(&self) -> Result<PromptEncoding> {
        let missing = |what: &str| Error::Parse(format!("prompt file lacks {what}"));
        match self.layout {
            Layout::GdInput => encode_gd_input(
                self.pairs.as_ref().ok_or_else(|| missing("pairs"))?,
                self.w.as_ref().ok_or_else(|| missing("w"))?,
            ),
            layout => {
                let x = self.x.as_ref().ok_or_else(|| missing("X"))?;
                let k = self.w_k.as_ref().ok_or_else(|| missing("W_K"))?;
                let q = self.w_q.as_ref().ok_or_else(|| missing("W_Q"))?;
                let v = self.w_v.as_ref().ok_or_else(|| missing("W_V"))?;
                if layout == Layout::WeightTokens {
                    encode_target_head(x, k, q, v)
                } else {
                    encode_rowstack(x, k, q, v)
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_target_block_layout() {
        let two = Matrix::row_vector(&[2.0]);
        let x = Matrix::row_vector(&[1.0, 0.0, -1.0]);
        let p = encode_target_head(&x, &two, &two, &two).unwrap();
        let expect = Matrix::from_rows(&[
            vec![0.0, 2.0, 4.0],
            vec![0.0, 2.0, 4.0],
            vec![0.0, 2.0, 4.0],
            vec![2.0, 2.0, 2.0],
            vec![2.0, 2.0, 2.0],
            vec![2.0, 2.0, 2.0],
        ])
        .unwrap();
        assert_eq!(p.w, expect);
        assert_eq!(p.matrix().unwrap().rows(), 10);
    }

    #[test]
    fn gd_single_pair() {
        let p = encode_gd_input(&[(vec![1.0, 0.0], 1.0)], &[0.0, 0.0]).unwrap();
        assert_eq!(p.matrix().unwrap().data(), &[1.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(encode_gd_input(&[(vec![1.0], 1.0)], &[0.0, 0.0]).is_err());
        assert!(encode_gd_input(&[], &[0.0]).is_err());
    }

    #[test]
    fn rowstack_identity_weights() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let i = Matrix::identity(2);
        let p = encode_rowstack(&x, &i, &i, &i).unwrap();
        let expect = stack_rows(&[&x, &i, &i, &i]).unwrap();
        assert_eq!(p.matrix().unwrap(), expect);
    }

    #[test]
    fn rejects_short_prompts() {
        let x = Matrix::zeros(2, 2);
        let w = Matrix::zeros(1, 2);
        assert!(encode_target_head(&x, &w, &w, &w).is_err());
    }

    #[test]
    fn prompt_file_round_trip() {
        let x = Matrix::from_fn(2, 4, |r, c| (r as f64 - c as f64) * 0.3);
        let k = Matrix::from_fn(3, 2, |r, c| (r + c) as f64 * 0.1);
        let p = encode_target_head(&x, &k, &k.scale(-1.0), &k.scale(0.5)).unwrap();
        let json = serde_json::to_string(&PromptFile::from_encoding(&p).unwrap()).unwrap();
        let back: PromptFile = serde_json::from_str(&json).unwrap();
        assert_eq!(back.to_encoding().unwrap(), p);
    }
}
