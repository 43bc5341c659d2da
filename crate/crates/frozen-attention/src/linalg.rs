//! Dense row-major matrices and the handful of kernels every construction
//! relies on: a deterministic product, a max-shifted column softmax, sup
//! norms, flattening helpers and a plain-text CSV format.
//!
//! Tokens are columns. Indices are 0-based everywhere in the public API;
//! where the maths numbers tokens `1..=n`, token `i` lives in column `i - 1`.

use std::fmt;
use std::ops::{Index, IndexMut};
use std::path::Path;

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A dense `rows x cols` matrix of `f64`, stored row-major.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Wrap a row-major buffer. Fails if the length is wrong or an entry is not finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "Matrix::new",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Matrix::new"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Build from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::Shape {
                    op: "Matrix::from_rows",
                    left: (i, row.len()),
                    right: (0, cols),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data)
    }

    /// A `len x 1` column vector.
    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    /// A `1 x len` row vector.
    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn set_col(&mut self, c: usize, values: &[f64]) {
        debug_assert_eq!(values.len(), self.rows);
        for (r, v) in values.iter().enumerate() {
            self.set(r, c, *v);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Matrix product with a fixed accumulation order (see [`matmul`]).
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// `self += alpha * other`.
    pub fn add_scaled_in_place(&mut self, other: &Matrix, alpha: f64) -> Result<()> {
        self.check_same_shape(other, "add_scaled_in_place")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        self.map(|v| alpha * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn max_abs(&self) -> f64 {
        sup_norm(self)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Rows `start..end` as a new matrix.
    pub fn row_block(&self, start: usize, end: usize) -> Result<Matrix> {
        if start > end || end > self.rows {
            return Err(Error::Index {
                index: end,
                len: self.rows,
            });
        }
        Ok(Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        })
    }

    /// Columns `start..end` as a new matrix.
    pub fn col_block(&self, start: usize, end: usize) -> Result<Matrix> {
        if start > end || end > self.cols {
            return Err(Error::Index {
                index: end,
                len: self.cols,
            });
        }
        Ok(Matrix::from_fn(self.rows, end - start, |r, c| self.get(r, start + c)))
    }

    /// Copy `block` into `self` with its top-left corner at `(r0, c0)`.
    pub fn set_block(&mut self, r0: usize, c0: usize, block: &Matrix) -> Result<()> {
        if r0 + block.rows > self.rows || c0 + block.cols > self.cols {
            return Err(Error::Shape {
                op: "set_block",
                left: self.shape(),
                right: (r0 + block.rows, c0 + block.cols),
            });
        }
        for r in 0..block.rows {
            let dst = (r0 + r) * self.cols + c0;
            self.data[dst..dst + block.cols].copy_from_slice(block.row(r));
        }
        Ok(())
    }

    /// SHA-256 over the shape and the exact bit patterns of the entries.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        feed_hasher(&mut hasher, self);
        hex(&hasher.finalize())
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.check_same_shape(other, op)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }
}

pub(crate) fn feed_hasher(hasher: &mut Sha256, m: &Matrix) {
    hasher.update((m.rows as u64).to_le_bytes());
    hasher.update((m.cols as u64).to_le_bytes());
    for v in &m.data {
        hasher.update(v.to_bits().to_le_bytes());
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Serialize for Matrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(deserializer)?;
        Matrix::from_rows(&rows).map_err(de::Error::custom)
    }
}

/// `A · B`, accumulating each entry over the inner index in increasing order
/// starting from `+0.0`, exactly like the textbook triple loop. Results are
/// therefore bit-reproducible.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (n, m) = (a.rows, b.cols);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for (k, &aik) in a.row(i).iter().enumerate() {
            // Adding a signed zero never changes a sum that started at +0.0,
            // so skipping zero coefficients keeps the result bit-identical.
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(Matrix {
        rows: n,
        cols: m,
        data: out,
    })
}

/// Column-wise softmax at inverse temperature `beta`.
///
/// Each column is shifted by its maximum before exponentiation, so the result
/// is well defined for arbitrarily large `beta`.
pub fn softmax_cols(s: &Matrix, beta: f64) -> Result<Matrix> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Domain(format!("softmax temperature must be positive, got {beta}")));
    }
    if !s.is_finite() {
        return Err(Error::NonFinite("softmax_cols input"));
    }
    let mut out = Matrix::zeros(s.rows, s.cols);
    let mut column = vec![0.0; s.rows];
    for c in 0..s.cols {
        softmax_column_into(s, c, beta, &mut column);
        out.set_col(c, &column);
    }
    Ok(out)
}

/// Softmax of column `c` of `s` written into `out` (length `s.rows()`).
pub(crate) fn softmax_column_into(s: &Matrix, c: usize, beta: f64, out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for r in 0..s.rows {
        max = max.max(s.get(r, c));
    }
    let mut total = 0.0;
    for (r, o) in out.iter_mut().enumerate() {
        let e = ((s.get(r, c) - max) * beta).exp();
        *o = e;
        total += e;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Largest absolute entry (0 for an empty matrix).
pub fn sup_norm(a: &Matrix) -> f64 {
    a.data.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Largest absolute entry of `a - b`.
pub fn sup_norm_diff(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "sup_norm_diff",
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(a.data
        .iter()
        .zip(&b.data)
        .fold(0.0, |m, (x, y)| m.max((x - y).abs())))
}

/// Row-major flattening into a column vector of length `rows * cols`.
pub fn vec(w: &Matrix) -> Matrix {
    Matrix::column(&w.data)
}

/// Exact inverse of [`vec`].
pub fn unvec(v: &Matrix, rows: usize, cols: usize) -> Result<Matrix> {
    if v.cols != 1 || v.rows != rows * cols {
        return Err(Error::Shape {
            op: "unvec",
            left: v.shape(),
            right: (rows, cols),
        });
    }
    Matrix::new(rows, cols, v.data.clone())
}

/// The `n x 1` unit vector with a one in (0-based) position `j`.
pub fn one_hot(j: usize, n: usize) -> Result<Matrix> {
    if j >= n {
        return Err(Error::Index { index: j, len: n });
    }
    let mut m = Matrix::zeros(n, 1);
    m.data[j] = 1.0;
    Ok(m)
}

/// Vertical concatenation; all blocks must have the same column count.
pub fn stack_rows(blocks: &[&Matrix]) -> Result<Matrix> {
    let cols = blocks.first().map_or(0, |b| b.cols);
    let mut data = Vec::new();
    let mut rows = 0;
    for b in blocks {
        if b.cols != cols {
            return Err(Error::Shape {
                op: "stack_rows",
                left: (rows, cols),
                right: b.shape(),
            });
        }
        data.extend_from_slice(&b.data);
        rows += b.rows;
    }
    Ok(Matrix { rows, cols, data })
}

/// Horizontal concatenation; all blocks must have the same row count.
pub fn stack_cols(blocks: &[&Matrix]) -> Result<Matrix> {
    let rows = blocks.first().map_or(0, |b| b.rows);
    let cols: usize = blocks.iter().map(|b| b.cols).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut c0 = 0;
    for b in blocks {
        if b.rows != rows {
            return Err(Error::Shape {
                op: "stack_cols",
                left: (rows, c0),
                right: b.shape(),
            });
        }
        out.set_block(0, c0, b)?;
        c0 += b.cols;
    }
    Ok(out)
}

/// Render in the CSV matrix format: a `rows,cols` header record followed by
/// one record per row, using the shortest decimal form that round-trips.
pub fn to_csv_string(m: &Matrix) -> String {
    let mut s = format!("{},{}\n", m.rows, m.cols);
    for r in 0..m.rows {
        let line: Vec<String> = m.row(r).iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

/// Parse the CSV matrix format produced by [`to_csv_string`].
pub fn from_csv_str(text: &str) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let header = records
        .next()
        .ok_or_else(|| Error::Parse("empty matrix file".into()))??;
    if header.len() != 2 {
        return Err(Error::Parse("first record must be `rows,cols`".into()));
    }
    let parse_dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|e| Error::Parse(format!("bad dimension {s:?}: {e}")))
    };
    let rows = parse_dim(&header[0])?;
    let cols = parse_dim(&header[1])?;
    let mut data = Vec::with_capacity(rows * cols);
    for (i, rec) in records.enumerate() {
        let rec = rec?;
        if rec.len() != cols {
            return Err(Error::Parse(format!(
                "line {}: expected {cols} values, found {}",
                i + 2,
                rec.len()
            )));
        }
        for field in rec.iter() {
            let v: f64 = field
                .parse()
                .map_err(|e| Error::Parse(format!("line {}: bad number {field:?}: {e}", i + 2)))?;
            data.push(v);
        }
    }
    if data.len() != rows * cols {
        return Err(Error::Parse(format!(
            "expected {rows} rows of data, found {}",
            data.len() / cols.max(1)
        )));
    }
    Matrix::new(rows, cols, data)
}

pub fn write_csv(m: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_csv_string(m))?;
    Ok(())
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Matrix> {
    from_csv_str(&std::fs::read_to_string(path)?)
}

/// Dot product of two equal-length slices, accumulated left to right.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm of a slice.
#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
