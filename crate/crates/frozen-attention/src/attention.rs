//! Softmax attention heads and multi-head layers.
//!
//! A head maps `X (d x n)` to `W_V X · Softmax_β((W_K X)ᵀ W_Q X) · W_O`,
//! with `W_O` defaulting to the identity. A layer is a sum of heads. Heads are
//! organised in groups that share an optional linear connection applied to the
//! layer input first, and whose outputs land at a fixed row offset of the
//! layer output. Both are bookkeeping only: [`MultiHeadAttention::materialize_head`]
//! turns any grouped head back into a plain head acting on the raw input.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{feed_hasher, hex, matmul, softmax_column_into, Matrix};

/// One attention head. `beta` is the inverse temperature applied to the scores.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead {
    pub w_k: Matrix,
    pub w_q: Matrix,
    pub w_v: Matrix,
    pub w_o: Option<Matrix>,
    pub beta: f64,
}

impl AttentionHead {
    pub fn new(w_k: Matrix, w_q: Matrix, w_v: Matrix, w_o: Option<Matrix>, beta: f64) -> Result<Self> {
        if w_k.shape() != w_q.shape() {
            return Err(Error::Weight {
                name: "W_Q",
                got: w_q.shape(),
                expected: format!("{:?} to match W_K", w_k.shape()),
            });
        }
        if w_v.cols() != w_k.cols() {
            return Err(Error::Weight {
                name: "W_V",
                got: w_v.shape(),
                expected: format!("{} columns to match W_K", w_k.cols()),
            });
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Domain(format!("head temperature must be positive, got {beta}")));
        }
        Ok(Self { w_k, w_q, w_v, w_o, beta })
    }

    /// Head with `W_O = I` and `beta = 1`.
    pub fn plain(w_k: Matrix, w_q: Matrix, w_v: Matrix) -> Result<Self> {
        Self::new(w_k, w_q, w_v, None, 1.0)
    }

    /// Token dimension `d` the head expects.
    pub fn input_dim(&self) -> usize {
        self.w_k.cols()
    }

    /// Score dimension `d_h`.
    pub fn score_dim(&self) -> usize {
        self.w_k.rows()
    }

    /// Value/output dimension `d_o`.
    pub fn output_dim(&self) -> usize {
        self.w_v.rows()
    }

    /// Output token count for an input with `n` tokens.
    pub fn output_tokens(&self, n: usize) -> usize {
        self.w_o.as_ref().map_or(n, Matrix::cols)
    }
}

/// Evaluate one head on `x`.
pub fn forward_head(h: &AttentionHead, x: &Matrix) -> Result<Matrix> {
    if x.rows() != h.input_dim() {
        return Err(Error::Weight {
            name: "W_K",
            got: h.w_k.shape(),
            expected: format!("{} columns for a {}-row input", x.rows(), x.rows()),
        });
    }
    if let Some(w_o) = &h.w_o {
        if w_o.rows() != x.cols() {
            return Err(Error::Weight {
                name: "W_O",
                got: w_o.shape(),
                expected: format!("{} rows for {} input tokens", x.cols(), x.cols()),
            });
        }
    }
    let k = matmul(&h.w_k, x)?;
    let q = matmul(&h.w_q, x)?;
    let v = matmul(&h.w_v, x)?;
    attend(&k, &q, &v, h.beta, h.w_o.as_ref())
}

/// `V · Softmax_β(Kᵀ Q) · W_O` from precomputed key, query and value tokens.
///
/// Only the softmax columns that `W_O` actually reads are evaluated; the
/// skipped columns meet zero rows of `W_O`, so the result is unchanged.
pub fn attend(k: &Matrix, q: &Matrix, v: &Matrix, beta: f64, w_o: Option<&Matrix>) -> Result<Matrix> {
    if k.rows() != q.rows() || k.cols() != v.cols() {
        return Err(Error::Shape {
            op: "attend",
            left: k.shape(),
            right: q.shape(),
        });
    }
    let needed: Vec<usize> = match w_o {
        None => (0..q.cols()).collect(),
        Some(o) => (0..o.rows()).filter(|&c| o.row(c).iter().any(|&w| w != 0.0)).collect(),
    };
    let kt = k.transpose();
    let q_needed = Matrix::from_fn(q.rows(), needed.len(), |r, j| q.get(r, needed[j]));
    let scores = matmul(&kt, &q_needed)?;
    if !scores.is_finite() {
        return Err(Error::NonFinite("attention scores"));
    }
    let mut probs = Matrix::zeros(scores.rows(), scores.cols());
    let mut column = vec![0.0; scores.rows()];
    for c in 0..scores.cols() {
        softmax_column_into(&scores, c, beta, &mut column);
        probs.set_col(c, &column);
    }
    let mixed = matmul(v, &probs)?;
    match w_o {
        None => Ok(mixed),
        Some(o) => {
            let o_needed = Matrix::from_fn(needed.len(), o.cols(), |j, c| o.get(needed[j], c));
            matmul(&mixed, &o_needed)
        }
    }
}

/// A linear connection `Z ↦ Σ_t L_t · Z · R_t + C`.
///
/// Terms without a right factor act token-wise; terms with one mix tokens
/// (a sequence-wise map). `C` is an optional constant, e.g. a positional code.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearConnection {
    pub terms: Vec<LinearTerm>,
    pub bias: Option<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearTerm {
    pub left: Matrix,
    pub right: Option<Matrix>,
}

impl LinearConnection {
    /// The purely token-wise map `Z ↦ A Z`.
    pub fn token_wise(a: Matrix) -> Self {
        Self {
            terms: vec![LinearTerm { left: a, right: None }],
            bias: None,
        }
    }

    /// Returns `A` when the connection is exactly `Z ↦ A Z`.
    pub fn as_token_wise(&self) -> Option<&Matrix> {
        match (self.terms.as_slice(), &self.bias) {
            ([LinearTerm { left, right: None }], None) => Some(left),
            _ => None,
        }
    }

    pub fn apply(&self, z: &Matrix) -> Result<Matrix> {
        let mut out: Option<Matrix> = self.bias.clone();
        for term in &self.terms {
            let lz = matmul(&term.left, z)?;
            let part = match &term.right {
                Some(r) => matmul(&lz, r)?,
                None => lz,
            };
            match &mut out {
                None => out = Some(part),
                Some(acc) => acc.add_scaled_in_place(&part, 1.0)?,
            }
        }
        out.ok_or_else(|| Error::Domain("linear connection without terms or bias".into()))
    }

    fn hash_into(&self, hasher: &mut Sha256) {
        for t in &self.terms {
            feed_hasher(hasher, &t.left);
            if let Some(r) = &t.right {
                feed_hasher(hasher, r);
            }
        }
        if let Some(b) = &self.bias {
            feed_hasher(hasher, b);
        }
    }
}

/// Heads that share a linear connection and an output row offset.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGroup {
    pub prefix: Option<LinearConnection>,
    /// Shared so that several groups (different prefixes) can reuse one block.
    pub heads: Arc<[AttentionHead]>,
    /// First row of the layer output that this group's head outputs occupy.
    pub row_offset: usize,
}

impl HeadGroup {
    pub fn plain(heads: Vec<AttentionHead>) -> Self {
        Self {
            prefix: None,
            heads: heads.into(),
            row_offset: 0,
        }
    }
}

/// A multi-head layer: the sum of all head outputs, embedded at their groups' offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub groups: Vec<HeadGroup>,
    /// Row count of the layer output.
    pub out_dim: usize,
}

impl MultiHeadAttention {
    /// An ungrouped layer: every head reads the raw input and writes rows `0..d_o`.
    pub fn from_heads(heads: Vec<AttentionHead>) -> Result<Self> {
        let out_dim = heads
            .first()
            .map(AttentionHead::output_dim)
            .ok_or_else(|| Error::Domain("a layer needs at least one head".into()))?;
        Self::new(vec![HeadGroup::plain(heads)], out_dim)
    }

    pub fn new(groups: Vec<HeadGroup>, out_dim: usize) -> Result<Self> {
        if groups.iter().all(|g| g.heads.is_empty()) {
            return Err(Error::Domain("a layer needs at least one head".into()));
        }
        for g in &groups {
            for h in g.heads.iter() {
                if g.row_offset + h.output_dim() > out_dim {
                    return Err(Error::Shape {
                        op: "MultiHeadAttention::new",
                        left: (g.row_offset + h.output_dim(), 0),
                        right: (out_dim, 0),
                    });
                }
            }
        }
        Ok(Self { groups, out_dim })
    }

    pub fn head_count(&self) -> usize {
        self.groups.iter().map(|g| g.heads.len()).sum()
    }

    /// SHA-256 over every weight, prefix, offset and temperature.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.out_dim as u64).to_le_bytes());
        for g in &self.groups {
            hasher.update((g.row_offset as u64).to_le_bytes());
            if let Some(p) = &g.prefix {
                p.hash_into(&mut hasher);
            }
            for h in g.heads.iter() {
                hash_head(&mut hasher, h);
            }
        }
        hex(&hasher.finalize())
    }

    /// The `index`-th head of group `group` as a plain head on the raw layer
    /// input, i.e. with a token-wise prefix folded in and `W_V` embedded at
    /// the group's row offset. Fails for sequence-wise prefixes, which are not
    /// expressible as a plain head.
    pub fn materialize_head(&self, group: usize, index: usize) -> Result<AttentionHead> {
        let g = self.groups.get(group).ok_or(Error::Index {
            index: group,
            len: self.groups.len(),
        })?;
        let h = g.heads.get(index).ok_or(Error::Index {
            index,
            len: g.heads.len(),
        })?;
        let folded = match &g.prefix {
            None => h.clone(),
            Some(p) => {
                let a = p.as_token_wise().ok_or_else(|| {
                    Error::Domain("sequence-wise prefixes cannot be folded into a head".into())
                })?;
                compose_linear_prefix(h, a)?
            }
        };
        let mut w_v = Matrix::zeros(self.out_dim, folded.w_v.cols());
        w_v.set_block(g.row_offset, 0, &folded.w_v)?;
        AttentionHead::new(folded.w_k, folded.w_q, w_v, folded.w_o, folded.beta)
    }
}

pub(crate) fn hash_head(hasher: &mut Sha256, h: &AttentionHead) {
    feed_hasher(hasher, &h.w_k);
    feed_hasher(hasher, &h.w_q);
    feed_hasher(hasher, &h.w_v);
    if let Some(o) = &h.w_o {
        feed_hasher(hasher, o);
    }
    hasher.update(h.beta.to_bits().to_le_bytes());
}

/// Sum of all head outputs, accumulated group by group and head by head.
pub fn forward_multi(m: &MultiHeadAttention, x: &Matrix) -> Result<Matrix> {
    let mut out: Option<Matrix> = None;
    for g in &m.groups {
        if g.heads.is_empty() {
            continue;
        }
        let z = match &g.prefix {
            Some(p) => p.apply(x)?,
            None => x.clone(),
        };
        for h in g.heads.iter() {
            let y = forward_head(h, &z)?;
            let acc = out.get_or_insert_with(|| Matrix::zeros(m.out_dim, y.cols()));
            if acc.cols() != y.cols() {
                return Err(Error::Shape {
                    op: "forward_multi",
                    left: acc.shape(),
                    right: y.shape(),
                });
            }
            for r in 0..y.rows() {
                let dst = acc.row_mut(g.row_offset + r);
                for (a, b) in dst.iter_mut().zip(y.row(r)) {
                    *a += b;
                }
            }
        }
    }
    out.ok_or_else(|| Error::Domain("a layer needs at least one head".into()))
}

/// Fold a token-wise map `A` in front of a head: returns the head with
/// `W_K A, W_Q A, W_V A`, so that `forward(new, Z) == forward(h, A Z)`.
pub fn compose_linear_prefix(h: &AttentionHead, a: &Matrix) -> Result<AttentionHead> {
    if a.rows() != h.input_dim() {
        return Err(Error::Shape {
            op: "compose_linear_prefix",
            left: h.w_k.shape(),
            right: a.shape(),
        });
    }
    AttentionHead::new(
        matmul(&h.w_k, a)?,
        matmul(&h.w_q, a)?,
        matmul(&h.w_v, a)?,
        h.w_o.clone(),
        h.beta,
    )
}

/// On-disk layer format: `{beta, heads: [{W_K, W_Q, W_V, W_O?, beta?}]}`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LayerFile {
    pub beta: f64,
    pub heads: Vec<HeadFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct HeadFile {
    #[serde(rename = "W_K")]
    pub w_k: Matrix,
    #[serde(rename = "W_Q")]
    pub w_q: Matrix,
    #[serde(rename = "W_V")]
    pub w_v: Matrix,
    #[serde(rename = "W_O", default, skip_serializing_if = "Option::is_none")]
    pub w_o: Option<Matrix>,
    /// Per-head temperature overriding the layer-level one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
}

impl LayerFile {
    pub fn from_heads(heads: &[AttentionHead]) -> Self {
        let beta = heads.first().map_or(1.0, |h| h.beta);
        Self {
            beta,
            heads: heads
                .iter()
                .map(|h| HeadFile {
                    w_k: h.w_k.clone(),
                    w_q: h.w_q.clone(),
                    w_v: h.w_v.clone(),
                    w_o: h.w_o.clone(),
                    beta: (h.beta != beta).then_some(h.beta),
                })
                .collect(),
            kind: None,
        }
    }

    pub fn to_heads(&self) -> Result<Vec<AttentionHead>> {
        self.heads
            .iter()
            .map(|f| {
                AttentionHead::new(
                    f.w_k.clone(),
                    f.w_q.clone(),
                    f.w_v.clone(),
                    f.w_o.clone(),
                    f.beta.unwrap_or(self.beta),
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn zero_scores_average_tokens() {
        let x = m(&[&[1.0, 2.0, 6.0], &[0.0, 3.0, 3.0]]);
        let h = AttentionHead::plain(Matrix::zeros(2, 2), Matrix::zeros(2, 2), Matrix::identity(2)).unwrap();
        let y = forward_head(&h, &x).unwrap();
        for c in 0..3 {
            assert!((y.get(0, c) - 3.0).abs() < 1e-15);
            assert!((y.get(1, c) - 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_token_returns_value() {
        let x = Matrix::column(&[0.5, -1.0]);
        let w_v = m(&[&[2.0, 1.0]]);
        let h = AttentionHead::plain(m(&[&[3.0, 1.0]]), m(&[&[-2.0, 4.0]]), w_v.clone()).unwrap();
        assert_eq!(forward_head(&h, &x).unwrap(), matmul(&w_v, &x).unwrap());
    }

    #[test]
    fn shape_errors_name_the_weight() {
        let h = AttentionHead::plain(Matrix::zeros(2, 3), Matrix::zeros(2, 3), Matrix::zeros(1, 3)).unwrap();
        let err = forward_head(&h, &Matrix::zeros(2, 4)).unwrap_err();
        assert!(err.to_string().contains("W_K"));
        assert!(AttentionHead::plain(Matrix::zeros(2, 3), Matrix::zeros(1, 3), Matrix::zeros(1, 3))
            .unwrap_err()
            .to_string()
            .contains("W_Q"));
        let bad_o = AttentionHead::new(
            Matrix::zeros(1, 2),
            Matrix::zeros(1, 2),
            Matrix::zeros(1, 2),
            Some(Matrix::zeros(5, 1)),
            1.0,
        )
        .unwrap();
        assert!(forward_head(&bad_o, &Matrix::zeros(2, 3)).unwrap_err().to_string().contains("W_O"));
    }

    #[test]
    fn duplicated_head_doubles_output() {
        let h = AttentionHead::plain(m(&[&[1.0, 0.5]]), m(&[&[0.2, -1.0]]), m(&[&[1.0, 1.0]])).unwrap();
        let x = m(&[&[0.1, 0.7, -0.3], &[1.0, -0.2, 0.4]]);
        let one = forward_head(&h, &x).unwrap();
        let two = forward_multi(&MultiHeadAttention::from_heads(vec![h.clone(), h]).unwrap(), &x).unwrap();
        assert_eq!(two, one.scale(2.0));
    }

    #[test]
    fn identity_prefix_is_noop() {
        let h = AttentionHead::plain(m(&[&[1.0, 0.5]]), m(&[&[0.2, -1.0]]), m(&[&[1.0, 1.0]])).unwrap();
        assert_eq!(compose_linear_prefix(&h, &Matrix::identity(2)).unwrap(), h);
    }

    #[test]
    fn grouped_heads_land_at_their_offsets() {
        let h = AttentionHead::plain(m(&[&[1.0]]), m(&[&[1.0]]), m(&[&[2.0]])).unwrap();
        let layer = MultiHeadAttention::new(
            vec![
                HeadGroup { prefix: None, heads: vec![h.clone()].into(), row_offset: 0 },
                HeadGroup {
                    prefix: Some(LinearConnection::token_wise(m(&[&[3.0]]))),
                    heads: vec![h].into(),
                    row_offset: 2,
                },
            ],
            3,
        )
        .unwrap();
        let x = Matrix::row_vector(&[1.0]);
        let y = forward_multi(&layer, &x).unwrap();
        assert_eq!(y.col(0), vec![2.0, 0.0, 6.0]);
        let plain: Vec<_> = (0..2)
            .map(|g| layer.materialize_head(g, 0).unwrap())
            .collect();
        let y2 = forward_multi(&MultiHeadAttention::from_heads(plain).unwrap(), &x).unwrap();
        assert_eq!(y, y2);
    }

    #[test]
    fn layer_file_round_trip() {
        let h = AttentionHead::new(m(&[&[1.0, 0.5]]), m(&[&[0.2, -1.0]]), m(&[&[1.0, 1.0]]), None, 3.0).unwrap();
        let file = LayerFile::from_heads(&[h.clone()]);
        let json = serde_json::to_string(&file).unwrap();
        assert!(json.contains("\"W_K\""));
        let back: LayerFile = serde_json::from_str(&json).unwrap();
        assert_eq!(back.to_heads().unwrap(), vec![h]);
    }
}
