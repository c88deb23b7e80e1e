//! Dense vectors and matrices, tensor products and the SPD solves behind the
//! closed-form ridge head.
//!
//! Tensor products use one index convention everywhere in the crate: for
//! `a ⊗ b` with `b` of length `d2`, output index `i * d2 + j` holds
//! `a[i] * b[j]`. Multi-factor products nest to the right, so
//! `a ⊗ b ⊗ c = a ⊗ (b ⊗ c)`.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// A dense vector of `f64`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    /// Builds a vector, rejecting NaN and infinite entries.
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.iter().all(|v| v.is_finite()) {
            Ok(Vector(entries))
        } else {
            Err(Error::NonFinite("vector"))
        }
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn scaled(&self, alpha: f64) -> Vector {
        Vector(self.0.iter().map(|v| alpha * v).collect())
    }

    pub fn norm_inf(&self) -> f64 {
        norm_inf(&self.0)
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dim("matrix entries", rows * cols, data.len())?;
        Ok(Matrix { rows, cols, data })
    }

    /// Stacks equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_dim("matrix row", cols, r.as_ref().len())?;
            data.extend_from_slice(r.as_ref());
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
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
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Copies the rows at `indices`, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn mul_vec(&self, x: &[f64]) -> Result<Vector> {
        check_dim("matrix-vector product", self.cols, x.len())?;
        Ok(Vector(
            (0..self.rows).map(|i| dot(self.row(i), x)).collect(),
        ))
    }

    /// `selfᵀ x`.
    pub fn tr_mul_vec(&self, x: &[f64]) -> Result<Vector> {
        check_dim("transposed matrix-vector product", self.rows, x.len())?;
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * xi;
            }
        }
        Ok(Vector(out))
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        gemm(1.0, self, Trans::No, other, Trans::No)
    }

    /// `selfᵀ · other`.
    pub fn tr_matmul(&self, other: &Matrix) -> Result<Matrix> {
        gemm(1.0, self, Trans::Yes, other, Trans::No)
    }

    /// `self · otherᵀ`.
    pub fn matmul_tr(&self, other: &Matrix) -> Result<Matrix> {
        gemm(1.0, self, Trans::No, other, Trans::Yes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

/// Borrowed row-major matrix view.
#[derive(Debug, Clone, Copy)]
pub struct MatRef<'a> {
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
}

impl<'a> MatRef<'a> {
    pub fn new(rows: usize, cols: usize, data: &'a [f64]) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        MatRef { rows, cols, data }
    }
}

impl Matrix {
    pub fn view(&self) -> MatRef<'_> {
        MatRef::new(self.rows, self.cols, &self.data)
    }
}

/// `alpha · op(a) · op(b)` through a blocked GEMM kernel.
pub fn gemm(alpha: f64, a: &Matrix, ta: Trans, b: &Matrix, tb: Trans) -> Result<Matrix> {
    gemm_view(alpha, a.view(), ta, b.view(), tb)
}

pub fn gemm_view(alpha: f64, a: MatRef<'_>, ta: Trans, b: MatRef<'_>, tb: Trans) -> Result<Matrix> {
    check_dim("gemm lhs buffer", a.rows * a.cols, a.data.len())?;
    check_dim("gemm rhs buffer", b.rows * b.cols, b.data.len())?;
    let (m, k, rsa, csa) = match ta {
        Trans::No => (a.rows, a.cols, a.cols as isize, 1),
        Trans::Yes => (a.cols, a.rows, 1, a.cols as isize),
    };
    let (kb, n, rsb, csb) = match tb {
        Trans::No => (b.rows, b.cols, b.cols as isize, 1),
        Trans::Yes => (b.cols, b.rows, 1, b.cols as isize),
    };
    check_dim("gemm inner dimension", k, kb)?;
    let mut c = Matrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return Ok(c);
    }
    // SAFETY: dimensions and strides describe the backing buffers exactly.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(c)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// `a ⊗ b`, output index `i * b.len() + j`.
pub fn tensor_product(a: &[f64], b: &[f64]) -> Vector {
    let mut out = Vec::with_capacity(a.len() * b.len());
    tensor_into(a, b, &mut out);
    Vector(out)
}

/// `a ⊗ b ⊗ c`, computed as `a ⊗ (b ⊗ c)`.
pub fn tensor_product3(a: &[f64], b: &[f64], c: &[f64]) -> Vector {
    tensor_product(a, &tensor_product(b, c))
}

/// Right-nested tensor product of any number of factors. The empty product
/// is the scalar `[1.0]`.
pub fn tensor_product_all(factors: &[&[f64]]) -> Vector {
    match factors {
        [] => Vector(vec![1.0]),
        [only] => Vector(only.to_vec()),
        [first, rest @ ..] => tensor_product(first, &tensor_product_all(rest)),
    }
}

fn tensor_into(a: &[f64], b: &[f64], out: &mut Vec<f64>) {
    for &ai in a {
        out.extend(b.iter().map(|&bj| ai * bj));
    }
}

/// Lower-triangular Cholesky factor of an SPD matrix. Only the lower
/// triangle of `a` is read.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    check_dim("cholesky (square)", a.rows, a.cols)?;
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let lj = &l.data[j * n..j * n + j];
        let diag = a.get(j, j) - dot(lj, lj);
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::NotPositiveDefinite {
                index: j,
                pivot: diag,
            });
        }
        let ljj = diag.sqrt();
        l.data[j * n + j] = ljj;
        for i in (j + 1)..n {
            let s = {
                let li = &l.data[i * n..i * n + j];
                let lj = &l.data[j * n..j * n + j];
                dot(li, lj)
            };
            l.data[i * n + j] = (a.get(i, j) - s) / ljj;
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ x = b` given the Cholesky factor `L`.
pub fn cholesky_solve(l: &Matrix, b: &[f64]) -> Result<Vector> {
    let n = l.rows;
    check_dim("cholesky solve rhs", n, b.len())?;
    let mut z = vec![0.0; n];
    for i in 0..n {
        let s = dot(&l.data[i * n..i * n + i], &z[..i]);
        z[i] = (b[i] - s) / l.data[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = 0.0;
        for k in (i + 1)..n {
            s += l.data[k * n + i] * x[k];
        }
        x[i] = (z[i] - s) / l.data[i * n + i];
    }
    Ok(Vector(x))
}

/// Solves `A x = b` for symmetric positive-definite `A`.
pub fn spd_solve(a: &Matrix, b: &[f64]) -> Result<Vector> {
    check_dim("spd_solve (square)", a.rows, a.cols)?;
    check_dim("spd_solve rhs", a.rows, b.len())?;
    let scale = norm_inf(&a.data).max(f64::MIN_POSITIVE);
    for i in 0..a.rows {
        for j in 0..i {
            if (a.get(i, j) - a.get(j, i)).abs() > 1e-10 * scale {
                return Err(Error::NotPositiveDefinite {
                    index: i,
                    pivot: f64::NAN,
                });
            }
        }
    }
    let l = cholesky(a)?;
    cholesky_solve(&l, b)
}

/// Closed-form ridge weight: solves `((1/n) ΦᵀΦ + λI) w = (1/n) Φᵀy`, the
/// unique minimizer of `(1/n)‖y − Φw‖² + λ‖w‖²`.
pub fn ridge_weight(phi: &Matrix, y: &[f64], lambda: f64) -> Result<Vector> {
    let n = phi.rows;
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    check_dim("ridge targets", n, y.len())?;
    if !(lambda > 0.0) {
        return Err(Error::Config(format!(
            "ridge lambda must be positive, got {lambda}"
        )));
    }
    let inv_n = 1.0 / n as f64;
    let mut gram = gemm(inv_n, phi, Trans::Yes, phi, Trans::No)?;
    for i in 0..gram.rows {
        gram.data[i * gram.cols + i] += lambda;
    }
    let mut rhs = phi.tr_mul_vec(y)?;
    for v in rhs.iter_mut() {
        *v *= inv_n;
    }
    let l = cholesky(&gram)?;
    cholesky_solve(&l, &rhs)
}

/// Regularized least-squares objective `(1/n)‖y − Φw‖² + λ‖w‖²`.
pub fn ridge_objective(phi: &Matrix, y: &[f64], w: &[f64], lambda: f64) -> Result<f64> {
    let pred = phi.mul_vec(w)?;
    let n = phi.rows as f64;
    let sse: f64 = pred.iter().zip(y).map(|(p, t)| (t - p) * (t - p)).sum();
    Ok(sse / n + lambda * dot(w, w))
}
