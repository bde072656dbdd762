//! Dense real matrices and the factorizations the rest of the crate needs.
//!
//! Everything is double precision, row-major, and pure: no operation mutates
//! its inputs. QR uses Householder reflections; the SVD is one-sided Jacobi,
//! which yields left singular vectors that are orthogonal to working precision
//! even for tiny singular values.
//!
//! Sign convention: every column of `Q` (QR) and `U` (SVD) is flipped so that
//! its largest-magnitude entry is positive. `V` follows `U`.

use serde::{Deserialize, Serialize};
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

const QR_RANK_TOL: f64 = 1e-10;
const JACOBI_TOL: f64 = 1e-15;
const ORTHONORMAL_TOL: f64 = 1e-8;

/// Row-major dense matrix. Zero-sized dimensions are allowed so an empty
/// subspace basis can be represented as a `d × 0` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                op: "DenseMatrix::new",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!(
                "non-finite entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
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

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from nested rows. Panics on ragged input; intended for
    /// literals in tests and small fixtures.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// Builds a `rows × columns.len()` matrix whose columns are the given vectors.
    pub fn from_columns(rows: usize, columns: &[Vec<f64>]) -> Self {
        let mut m = Self::zeros(rows, columns.len());
        for (j, c) in columns.iter().enumerate() {
            assert_eq!(c.len(), rows, "column length mismatch");
            for (i, v) in c.iter().enumerate() {
                m[(i, j)] = *v;
            }
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

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        for (i, v) in values.iter().enumerate() {
            self[(i, j)] = *v;
        }
    }

    pub fn columns(&self) -> Vec<Vec<f64>> {
        (0..self.cols).map(|j| self.column(j)).collect()
    }

    /// The first `k` columns.
    pub fn leading_columns(&self, k: usize) -> Self {
        assert!(k <= self.cols);
        Self::from_fn(self.rows, k, |i, j| self[(i, j)])
    }

    /// Rows `start..end`.
    pub fn row_block(&self, start: usize, end: usize) -> Self {
        assert!(start <= end && end <= self.rows);
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hstack(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::Dimension {
                op: "hstack",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let cols = self.cols + other.cols;
        Ok(Self::from_fn(self.rows, cols, |i, j| {
            if j < self.cols {
                self[(i, j)]
            } else {
                other[(i, j - self.cols)]
            }
        }))
    }

    /// Vertical concatenation.
    pub fn vstack(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::Dimension {
                op: "vstack",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        matmul(self, other)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::Dimension {
                op: "t_matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Self::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = out.row_mut(i);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::Dimension {
                op: "matmul_t",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Self::from_fn(self.rows, other.rows, |i, j| {
            dot(self.row(i), other.row(j))
        }))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, alpha: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| alpha * v).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Frobenius inner product `⟨self, other⟩ = tr(selfᵀ other)`.
    pub fn frobenius_dot(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other, "frobenius_dot")?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other, op)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `‖QᵀQ − I‖_F`
pub fn orthonormality_error(q: &DenseMatrix) -> f64 {
    let gram = q.t_matmul(q).expect("gram of a matrix with itself");
    gram.sub(&DenseMatrix::identity(q.cols()))
        .expect("square gram")
        .frobenius_norm()
}

/// Flips each column so its largest-magnitude entry is positive. Returns the
/// applied signs so paired factors can follow.
fn canonicalize_column_signs(m: &mut DenseMatrix) -> Vec<f64> {
    let mut signs = Vec::with_capacity(m.cols);
    for j in 0..m.cols {
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for i in 0..m.rows {
            let v = m[(i, j)];
            if v.abs() > best {
                best = v.abs();
                sign = if v < 0.0 { -1.0 } else { 1.0 };
            }
        }
        if sign < 0.0 {
            for i in 0..m.rows {
                m[(i, j)] = -m[(i, j)];
            }
        }
        signs.push(sign);
    }
    signs
}

/// Householder QR returning the thin orthonormal factor `Q` (same shape as
/// the input) with `span(Q) = span(m)`.
pub fn qr_orthonormalize(m: &DenseMatrix) -> Result<DenseMatrix> {
    let (rows, cols) = m.shape();
    if rows < cols {
        return Err(Error::Dimension {
            op: "qr_orthonormalize (needs rows >= cols)",
            left: m.shape(),
            right: (cols, cols),
        });
    }
    let mut work = m.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for k in 0..cols {
        let x: Vec<f64> = (k..rows).map(|i| work[(i, k)]).collect();
        let x_norm = norm(&x);
        if x_norm < QR_RANK_TOL {
            return Err(Error::RankDeficient {
                column: k,
                norm: x_norm,
            });
        }
        let alpha = if x[0] >= 0.0 { -x_norm } else { x_norm };
        let mut v = x;
        v[0] -= alpha;
        let v_norm = norm(&v);
        for e in v.iter_mut() {
            *e /= v_norm;
        }
        for j in k..cols {
            let proj: f64 = (k..rows).map(|i| v[i - k] * work[(i, j)]).sum();
            for i in k..rows {
                work[(i, j)] -= 2.0 * v[i - k] * proj;
            }
        }
        reflectors.push(v);
    }

    let mut q = DenseMatrix::zeros(rows, cols);
    for j in 0..cols {
        q[(j, j)] = 1.0;
    }
    for (k, v) in reflectors.iter().enumerate().rev() {
        for j in 0..cols {
            let proj: f64 = (k..rows).map(|i| v[i - k] * q[(i, j)]).sum();
            if proj == 0.0 {
                continue;
            }
            for i in k..rows {
                q[(i, j)] -= 2.0 * v[i - k] * proj;
            }
        }
    }
    canonicalize_column_signs(&mut q);
    Ok(q)
}

/// Thin singular value decomposition `m = U · diag(s) · Vᵀ` with
/// `k = min(rows, cols)` components.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub u: DenseMatrix,
    pub singular_values: Vec<f64>,
    pub v: DenseMatrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> DenseMatrix {
        let scaled = DenseMatrix::from_fn(self.u.rows(), self.u.cols(), |i, j| {
            self.u[(i, j)] * self.singular_values[j]
        });
        scaled.matmul_t(&self.v).expect("svd factor shapes agree")
    }
}

pub fn thin_svd(m: &DenseMatrix) -> Result<SvdResult> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::contract("thin_svd of an empty matrix"));
    }
    if m.rows() < m.cols() {
        let t = jacobi_svd(&m.transpose())?;
        let mut u = t.v;
        let mut v = t.u;
        let signs = canonicalize_column_signs(&mut u);
        apply_signs(&mut v, &signs);
        return Ok(SvdResult {
            u,
            singular_values: t.singular_values,
            v,
        });
    }
    jacobi_svd(m)
}

fn apply_signs(m: &mut DenseMatrix, signs: &[f64]) {
    for (j, &s) in signs.iter().enumerate() {
        if s < 0.0 {
            for i in 0..m.rows() {
                m[(i, j)] = -m[(i, j)];
            }
        }
    }
}

/// One-sided (Hestenes) Jacobi for `rows >= cols`.
fn jacobi_svd(m: &DenseMatrix) -> Result<SvdResult> {
    let (rows, cols) = m.shape();
    let mut w: Vec<Vec<f64>> = m.columns();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| {
            let mut e = vec![0.0; cols];
            e[j] = 1.0;
            e
        })
        .collect();

    let max_sweeps = 100 * rows.min(cols);
    let scale: f64 = w.iter().map(|c| dot(c, c)).sum();
    let negligible = (f64::EPSILON * f64::EPSILON) * scale;
    let mut converged = false;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q], &w[q]);
                let gamma = dot(&w[p], &w[q]);
                if gamma == 0.0
                    || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt()
                    || alpha.min(beta) <= negligible
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut w, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence { sweeps: max_sweeps });
    }

    let sigma: Vec<f64> = w.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));
    let sigma_max = sigma[order[0]];

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut values = Vec::with_capacity(cols);
    for &j in &order {
        let s = sigma[j];
        let mut candidate = None;
        if s > 0.0 && s > sigma_max * 1e-14 {
            let mut u: Vec<f64> = w[j].iter().map(|x| x / s).collect();
            orthogonalize_against(&mut u, &u_cols);
            let n = norm(&u);
            if n > 0.5 {
                u.iter_mut().for_each(|x| *x /= n);
                candidate = Some(u);
            }
        }
        let u = match candidate {
            Some(u) => u,
            None => complete_basis_vector(rows, &u_cols),
        };
        u_cols.push(u);
        v_cols.push(v[j].clone());
        values.push(s);
    }

    let mut u = DenseMatrix::from_columns(rows, &u_cols);
    let mut vm = DenseMatrix::from_columns(cols, &v_cols);
    let signs = canonicalize_column_signs(&mut u);
    apply_signs(&mut vm, &signs);
    Ok(SvdResult {
        u,
        singular_values: values,
        v: vm,
    })
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (a, b) in cp.iter_mut().zip(cq.iter_mut()) {
        let x = *a;
        let y = *b;
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Two passes of modified Gram-Schmidt against an orthonormal set.
fn orthogonalize_against(u: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for b in basis {
            let p = dot(u, b);
            for (x, y) in u.iter_mut().zip(b) {
                *x -= p * y;
            }
        }
    }
}

/// Deterministic unit vector orthogonal to `basis`: the standard basis vector
/// with the largest residual after projection.
fn complete_basis_vector(dim: usize, basis: &[Vec<f64>]) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for i in 0..dim {
        let mut e = vec![0.0; dim];
        e[i] = 1.0;
        orthogonalize_against(&mut e, basis);
        let n = norm(&e);
        if best.as_ref().is_none_or(|(bn, _)| n > *bn + 1e-12) {
            best = Some((n, e));
        }
    }
    let (n, mut e) = best.expect("dim >= 1");
    e.iter_mut().for_each(|x| *x /= n);
    e
}

/// Checks that `basis` has orthonormal columns within the shared tolerance.
pub fn check_orthonormal(basis: &DenseMatrix, what: &str) -> Result<()> {
    if basis.cols() == 0 {
        return Ok(());
    }
    let err = orthonormality_error(basis);
    if err > ORTHONORMAL_TOL {
        return Err(Error::contract(format!(
            "{what} columns are not orthonormal (‖QᵀQ − I‖_F = {err:.3e})"
        )));
    }
    Ok(())
}

/// `(I − B Bᵀ) H` for a basis `B` with orthonormal columns.
///
/// The projection is applied twice so the result is orthogonal to `B` to
/// working precision even when `B` is only orthonormal to ~1e-8.
pub fn project_complement(basis: &DenseMatrix, h: &DenseMatrix) -> Result<DenseMatrix> {
    if basis.rows() != h.rows() {
        return Err(Error::Dimension {
            op: "project_complement",
            left: basis.shape(),
            right: h.shape(),
        });
    }
    if basis.cols() == 0 {
        return Ok(h.clone());
    }
    check_orthonormal(basis, "projection basis")?;
    let mut out = h.clone();
    for _ in 0..2 {
        let coeffs = basis.t_matmul(&out)?;
        let along = basis.matmul(&coeffs)?;
        out = out.sub(&along)?;
    }
    Ok(out)
}

/// Principal angles (radians, ascending) between the column spans of two
/// matrices with orthonormal columns.
pub fn principal_angles(a: &DenseMatrix, b: &DenseMatrix) -> Result<Vec<f64>> {
    if a.cols() < b.cols() {
        return principal_angles(b, a);
    }
    let cross = a.t_matmul(b)?;
    if cross.rows() == 0 || cross.cols() == 0 {
        return Ok(Vec::new());
    }
    let cosines = thin_svd(&cross)?.singular_values;
    // Small angles are resolved from the sines: acos loses half the digits near 1.
    let residual = b.sub(&a.matmul(&cross)?)?;
    let mut sines = thin_svd(&residual)?.singular_values;
    sines.reverse();
    Ok(cosines
        .iter()
        .zip(&sines)
        .map(|(&c, &s)| {
            if c * c < 0.5 {
                c.clamp(0.0, 1.0).acos()
            } else {
                s.clamp(0.0, 1.0).asin()
            }
        })
        .collect())
}
