//! Dense row-major matrices and real vectors.
//!
//! All arithmetic is in `f64`. Public constructors reject non-finite
//! entries, so downstream code can assume every value it sees is finite.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// A vector of 64-bit reals with all entries finite.
#[derive(Clone, Debug, PartialEq)]
pub struct RealVector {
    data: Vec<f64>,
}

impl RealVector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("RealVector::new"));
        }
        Ok(Self { data })
    }

    pub(crate) fn from_raw(data: Vec<f64>) -> Self {
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { data }
    }

    pub fn zeros(n: usize) -> Self {
        Self { data: vec![0.0; n] }
    }

    pub fn ones(n: usize) -> Self {
        Self { data: vec![1.0; n] }
    }

    /// Standard normal samples.
    pub fn gaussian(n: usize, rng: &mut impl Rng) -> Self {
        Self {
            data: (0..n).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn dot(&self, other: &RealVector) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::shape("dot", self.len().to_string(), other.len().to_string()));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn add(&self, other: &RealVector) -> Result<RealVector> {
        if self.len() != other.len() {
            return Err(Error::shape("vector add", self.len().to_string(), other.len().to_string()));
        }
        Ok(Self::from_raw(
            self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        ))
    }

    pub fn sub(&self, other: &RealVector) -> Result<RealVector> {
        if self.len() != other.len() {
            return Err(Error::shape("vector sub", self.len().to_string(), other.len().to_string()));
        }
        Ok(Self::from_raw(
            self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        ))
    }

    pub fn scale(&self, factor: f64) -> RealVector {
        Self::from_raw(self.data.iter().map(|v| v * factor).collect())
    }

    /// Rescale to unit Euclidean norm. Errors on the zero vector.
    pub fn normalized(&self) -> Result<RealVector> {
        let n = self.norm();
        if n <= 0.0 {
            return Err(Error::InvalidArgument("cannot normalize a zero vector".into()));
        }
        Ok(self.scale(1.0 / n))
    }
}

impl Index<usize> for RealVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl Serialize for RealVector {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.data.serialize(s)
    }
}

impl<'de> Deserialize<'de> for RealVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let data = Vec::<f64>::deserialize(d)?;
        RealVector::new(data).map_err(D::Error::custom)
    }
}

/// A dense row-major matrix of 64-bit reals with all entries finite.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(
                "DenseMatrix::new",
                format!("{} entries", rows * cols),
                format!("{} entries", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("DenseMatrix::new"));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
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
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Square matrix with `d` on the diagonal and zeros elsewhere.
    pub fn from_diag(d: &[f64]) -> Self {
        let n = d.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in d.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    /// Assemble a matrix whose columns are the given vectors.
    pub fn from_columns(columns: &[RealVector]) -> Result<Self> {
        let cols = columns.len();
        if cols == 0 {
            return Err(Error::InvalidArgument("from_columns needs at least one column".into()));
        }
        let rows = columns[0].len();
        if columns.iter().any(|c| c.len() != rows) {
            return Err(Error::shape("from_columns", format!("columns of length {rows}"), "ragged columns"));
        }
        Ok(Self::from_fn(rows, cols, |i, j| columns[j][i]))
    }

    /// Standard normal entries.
    pub fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        Self {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> RealVector {
        RealVector::from_raw((0..self.rows).map(|i| self.data[i * self.cols + j]).collect())
    }

    pub fn set_column(&mut self, j: usize, v: &RealVector) {
        assert_eq!(v.len(), self.rows);
        for i in 0..self.rows {
            self.data[i * self.cols + j] = v[i];
        }
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != rhs.rows {
            return Err(Error::shape(
                "matmul",
                format!("lhs cols == rhs rows ({})", self.cols),
                format!("{}", rhs.rows),
            ));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        // i-k-j loop order keeps the inner traversal contiguous.
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &RealVector) -> Result<RealVector> {
        if self.cols != v.len() {
            return Err(Error::shape("matvec", self.cols.to_string(), v.len().to_string()));
        }
        Ok(RealVector::from_raw(
            (0..self.rows)
                .map(|i| self.row(i).iter().zip(v.iter()).map(|(a, b)| a * b).sum())
                .collect(),
        ))
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with(other, "matrix add", |a, b| a + b)
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with(other, "matrix sub", |a, b| a - b)
    }

    fn zip_with(&self, other: &DenseMatrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<DenseMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(
                op,
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        Ok(Self::from_raw(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        ))
    }

    pub fn scale(&self, factor: f64) -> DenseMatrix {
        Self::from_raw(self.rows, self.cols, self.data.iter().map(|v| v * factor).collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute entrywise difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &DenseMatrix) -> Result<f64> {
        let d = self.sub(other)?;
        Ok(d.max_abs())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Display for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.rows {
            for j in 0..self.cols {
                if j > 0 {
                    write!(f, " ")?;
                }
                write!(f, "{:>12.6}", self[(i, j)])?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Serialized form: shape header plus row-nested entries.
#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    data: Vec<Vec<f64>>,
}

impl Serialize for DenseMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let repr = MatrixRepr {
            rows: self.rows,
            cols: self.cols,
            data: (0..self.rows).map(|i| self.row(i).to_vec()).collect(),
        };
        repr.serialize(s)
    }
}

impl<'de> Deserialize<'de> for DenseMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = MatrixRepr::deserialize(d)?;
        if repr.data.len() != repr.rows || repr.data.iter().any(|r| r.len() != repr.cols) {
            return Err(D::Error::custom("matrix payload does not match its shape header"));
        }
        DenseMatrix::new(repr.rows, repr.cols, repr.data.into_iter().flatten().collect())
            .map_err(D::Error::custom)
    }
}

/// Frobenius inner product `tr(a' b)`, the entrywise product sum.
pub fn frobenius_inner(a: &DenseMatrix, b: &DenseMatrix) -> Result<f64> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::shape(
            "frobenius_inner",
            format!("{}x{}", a.rows, a.cols),
            format!("{}x{}", b.rows, b.cols),
        ));
    }
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum())
}

/// Max-entry deviation of `basis' basis` from the identity.
pub fn orthonormality_defect(basis: &DenseMatrix) -> f64 {
    let mut worst = 0.0f64;
    for a in 0..basis.cols {
        for b in a..basis.cols {
            let mut dot = 0.0;
            for i in 0..basis.rows {
                dot += basis[(i, a)] * basis[(i, b)];
            }
            let target = if a == b { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

const PROJECTION_BASIS_TOL: f64 = 1e-8;

/// Orthogonal projection of the columns of `x` onto the column span of
/// `basis`: returns `basis (basis' x)`.
///
/// The basis must have orthonormal columns (checked to 1e-8); the result
/// is idempotent under re-application.
pub fn project_onto_columns(x: &DenseMatrix, basis: &DenseMatrix) -> Result<DenseMatrix> {
    if basis.rows != x.rows {
        return Err(Error::shape(
            "project_onto_columns",
            format!("{} rows", basis.rows),
            format!("{} rows", x.rows),
        ));
    }
    let defect = orthonormality_defect(basis);
    if defect > PROJECTION_BASIS_TOL {
        return Err(Error::NotOrthonormal {
            what: "projection basis",
            deviation: defect,
        });
    }
    let coords = basis.transpose().matmul(x)?;
    basis.matmul(&coords)
}

/// Solve `a x = b` for a small square `a` by Gaussian elimination with
/// partial pivoting. Intended for tiny systems (adapter-rank sized).
pub fn solve_linear(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows != a.cols {
        return Err(Error::shape("solve_linear", "square matrix".to_string(), format!("{}x{}", a.rows, a.cols)));
    }
    if b.rows != a.rows {
        return Err(Error::shape("solve_linear", format!("{} rows", a.rows), format!("{}", b.rows)));
    }
    let n = a.rows;
    let mut work = a.clone();
    let mut rhs = b.clone();
    for col in 0..n {
        let mut pivot = col;
        for row in (col + 1)..n {
            if work[(row, col)].abs() > work[(pivot, col)].abs() {
                pivot = row;
            }
        }
        if work[(pivot, col)].abs() < 1e-300 {
            return Err(Error::InvalidArgument("solve_linear: singular system".into()));
        }
        if pivot != col {
            for j in 0..n {
                let tmp = work[(col, j)];
                work[(col, j)] = work[(pivot, j)];
                work[(pivot, j)] = tmp;
            }
            for j in 0..rhs.cols {
                let tmp = rhs[(col, j)];
                rhs[(col, j)] = rhs[(pivot, j)];
                rhs[(pivot, j)] = tmp;
            }
        }
        let diag = work[(col, col)];
        for row in (col + 1)..n {
            let factor = work[(row, col)] / diag;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                let v = work[(col, j)];
                work[(row, j)] -= factor * v;
            }
            for j in 0..rhs.cols {
                let v = rhs[(col, j)];
                rhs[(row, j)] -= factor * v;
            }
        }
    }
    // Back substitution.
    let mut x = DenseMatrix::zeros(n, rhs.cols);
    for col in 0..rhs.cols {
        for row in (0..n).rev() {
            let mut acc = rhs[(row, col)];
            for j in (row + 1)..n {
                acc -= work[(row, j)] * x[(j, col)];
            }
            x[(row, col)] = acc / work[(row, row)];
        }
    }
    Ok(x)
}

/// Orthonormalize the columns of `m` with modified Gram-Schmidt, run
/// twice for numerical orthogonality near machine precision.
///
/// Errors if the columns are numerically rank-deficient.
pub fn orthonormalize_columns(m: &DenseMatrix) -> Result<DenseMatrix> {
    let mut q = m.clone();
    for _ in 0..2 {
        for j in 0..q.cols {
            let mut col = q.column(j);
            for p in 0..j {
                let prev = q.column(p);
                let coeff = col.dot(&prev)?;
                col = col.sub(&prev.scale(coeff))?;
            }
            let norm = col.norm();
            if norm < 1e-12 {
                return Err(Error::InvalidArgument(
                    "orthonormalize_columns: numerically rank-deficient input".into(),
                ));
            }
            q.set_column(j, &col.scale(1.0 / norm));
        }
    }
    Ok(q)
}
