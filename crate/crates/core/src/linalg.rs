//! Dense matrix algebra and decompositions that every variant's math reduces to.
//!
//! Everything is 64-bit, row-major, and deterministic: decompositions apply a
//! fixed sign convention so repeated calls are bit-identical, which the
//! initialization variants and golden tests rely on.

use crate::error::LinalgError;
use crate::rng::RngStream;
use serde::{Deserialize, Serialize};

/// Relative threshold for numerical-rank decisions: count sigma_i > RANK_EPS * sigma_1.
pub const RANK_EPS: f64 = 1e-8;

/// Dense real matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![1.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Mat::from_vec(self.rows, self.cols, data)
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!(self.shape(), other.shape(), "sub shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Mat::from_vec(self.rows, self.cols, data)
    }

    pub fn scale(&self, k: f64) -> Mat {
        Mat::from_vec(self.rows, self.cols, self.data.iter().map(|a| a * k).collect())
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn add_scaled_assign(&mut self, other: &Mat, k: f64) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * *b;
        }
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    /// Frobenius inner product <A, B>.
    pub fn dot(&self, other: &Mat) -> f64 {
        assert_eq!(self.shape(), other.shape(), "dot shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.at(i, j)).collect()
    }

    pub fn set_col(&mut self, j: usize, v: &[f64]) {
        assert_eq!(v.len(), self.rows);
        for i in 0..self.rows {
            *self.at_mut(i, j) = v[i];
        }
    }

    /// Rows [r0, r1) and columns [c0, c1) as a new matrix.
    pub fn slice(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> Mat {
        assert!(r1 <= self.rows && c1 <= self.cols && r0 <= r1 && c0 <= c1);
        let mut out = Mat::zeros(r1 - r0, c1 - c0);
        for i in r0..r1 {
            for j in c0..c1 {
                *out.at_mut(i - r0, j - c0) = self.at(i, j);
            }
        }
        out
    }

    /// Keep the listed columns, in the given order.
    pub fn select_cols(&self, idx: &[usize]) -> Mat {
        let mut out = Mat::zeros(self.rows, idx.len());
        for (k, &j) in idx.iter().enumerate() {
            for i in 0..self.rows {
                *out.at_mut(i, k) = self.at(i, j);
            }
        }
        out
    }

    /// Rows cyclically shifted downward by `shift`.
    pub fn roll_rows(&self, shift: usize) -> Mat {
        if self.rows == 0 {
            return self.clone();
        }
        let s = shift % self.rows;
        let mut out = Mat::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            let dst = (i + s) % self.rows;
            out.data[dst * self.cols..(dst + 1) * self.cols]
                .copy_from_slice(self.row(i));
        }
        out
    }

    /// Horizontal concatenation [A | B].
    pub fn hcat(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "hcat row mismatch");
        let mut out = Mat::zeros(self.rows, self.cols + other.cols);
        for i in 0..self.rows {
            out.data[i * out.cols..i * out.cols + self.cols].copy_from_slice(self.row(i));
            out.data[i * out.cols + self.cols..(i + 1) * out.cols]
                .copy_from_slice(other.row(i));
        }
        out
    }

    /// Vertical concatenation [A ; B].
    pub fn vcat(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "vcat col mismatch");
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Mat::from_vec(self.rows + other.rows, self.cols, data)
    }

    /// Euclidean norm of column j.
    pub fn col_norm(&self, j: usize) -> f64 {
        (0..self.rows).map(|i| self.at(i, j).powi(2)).sum::<f64>().sqrt()
    }

    /// Spectral norm via the largest singular value.
    pub fn spectral_norm(&self) -> f64 {
        match svd(self) {
            Ok(s) => s.singular_values.first().copied().unwrap_or(0.0),
            Err(_) => 0.0,
        }
    }
}

/// Matrix product a*b.
pub fn matmul(a: &Mat, b: &Mat) -> Result<Mat, LinalgError> {
    if a.cols != b.rows {
        return Err(LinalgError::DimensionMismatch(format!(
            "matmul {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = b.row(k);
            for j in 0..b.cols {
                orow[j] += aik * brow[j];
            }
        }
    }
    Ok(out)
}

/// Convenience product that panics on mismatch; internal use where shapes are static.
pub(crate) fn mm(a: &Mat, b: &Mat) -> Mat {
    matmul(a, b).expect("static shape")
}

/// Elementwise (Hadamard) product.
pub fn hadamard(a: &Mat, b: &Mat) -> Result<Mat, LinalgError> {
    if a.shape() != b.shape() {
        return Err(LinalgError::DimensionMismatch(format!(
            "hadamard {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(Mat::from_vec(
        a.rows,
        a.cols,
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    ))
}

/// Kronecker product, (a.rows*b.rows) x (a.cols*b.cols).
pub fn kronecker(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.rows * b.rows, a.cols * b.cols);
    for i in 0..a.rows {
        for j in 0..a.cols {
            let aij = a.at(i, j);
            if aij == 0.0 {
                continue;
            }
            for p in 0..b.rows {
                for q in 0..b.cols {
                    *out.at_mut(i * b.rows + p, j * b.cols + q) = aij * b.at(p, q);
                }
            }
        }
    }
    out
}

/// Block-diagonal assembly of the given blocks.
pub fn block_diag(blocks: &[Mat]) -> Result<Mat, LinalgError> {
    if blocks.is_empty() {
        return Err(LinalgError::EmptyInput("block_diag".into()));
    }
    let rows: usize = blocks.iter().map(|b| b.rows).sum();
    let cols: usize = blocks.iter().map(|b| b.cols).sum();
    let mut out = Mat::zeros(rows, cols);
    let (mut r0, mut c0) = (0, 0);
    for b in blocks {
        for i in 0..b.rows {
            for j in 0..b.cols {
                *out.at_mut(r0 + i, c0 + j) = b.at(i, j);
            }
        }
        r0 += b.rows;
        c0 += b.cols;
    }
    Ok(out)
}

/// Thin SVD result with M = U * diag(S) * V^T.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Mat,
    pub singular_values: Vec<f64>,
    pub v: Mat,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Mat {
        let k = self.singular_values.len();
        let mut us = self.u.clone();
        for j in 0..k {
            for i in 0..us.rows {
                *us.at_mut(i, j) *= self.singular_values[j];
            }
        }
        mm(&us, &self.v.transpose())
    }

    /// Rank-r truncation U_r S_r V_r^T.
    pub fn truncate(&self, r: usize) -> Mat {
        let r = r.min(self.singular_values.len());
        let mut out = Mat::zeros(self.u.rows, self.v.rows);
        for t in 0..r {
            let s = self.singular_values[t];
            for i in 0..self.u.rows {
                let uis = self.u.at(i, t) * s;
                for j in 0..self.v.rows {
                    out.data[i * out.cols + j] += uis * self.v.at(j, t);
                }
            }
        }
        out
    }
}

const JACOBI_MAX_SWEEPS: usize = 64;

/// Thin SVD via one-sided Jacobi, singular values descending.
///
/// Sign convention: the largest-magnitude entry of each U column is
/// non-negative (first occurrence wins ties), so repeated calls are
/// bit-identical. Zero singular directions get deterministic orthonormal
/// completion columns in U.
pub fn svd(m: &Mat) -> Result<SvdResult, LinalgError> {
    if !m.is_finite() {
        return Err(LinalgError::NonFinite("svd input".into()));
    }
    if m.rows == 0 || m.cols == 0 {
        return Err(LinalgError::EmptyInput("svd".into()));
    }
    if m.rows >= m.cols {
        svd_tall(m)
    } else {
        let r = svd_tall(&m.transpose())?;
        Ok(SvdResult {
            u: r.v,
            singular_values: r.singular_values,
            v: r.u,
        })
    }
}

fn svd_tall(m: &Mat) -> Result<SvdResult, LinalgError> {
    let (rows, cols) = m.shape();
    debug_assert!(rows >= cols);
    // Work on columns of a copy; accumulate right rotations into V.
    let mut a = m.clone();
    let mut v = Mat::identity(cols);
    let scale = m.max_abs();
    let tol = 1e-15;
    let mut converged = false;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..rows {
                    let x = a.at(i, p);
                    let y = a.at(i, q);
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                off = off.max(apq.abs() / (app.sqrt() * aqq.sqrt() + 1e-300));
                if apq.abs() <= tol * (app * aqq).sqrt() + 1e-300 * scale {
                    continue;
                }
                // Jacobi rotation zeroing the (p,q) Gram entry.
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let x = a.at(i, p);
                    let y = a.at(i, q);
                    *a.at_mut(i, p) = c * x - s * y;
                    *a.at_mut(i, q) = s * x + c * y;
                }
                for i in 0..cols {
                    let x = v.at(i, p);
                    let y = v.at(i, q);
                    *v.at_mut(i, p) = c * x - s * y;
                    *v.at_mut(i, q) = s * x + c * y;
                }
            }
        }
        if off < 1e-14 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(LinalgError::SvdNoConvergence(JACOBI_MAX_SWEEPS));
    }

    // Singular values = column norms, sorted descending (stable on ties).
    let mut order: Vec<usize> = (0..cols).collect();
    let norms: Vec<f64> = (0..cols).map(|j| a.col_norm(j)).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());
    let singular_values: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let mut u = Mat::zeros(rows, cols);
    let v_sorted = v.select_cols(&order);
    let mut v_out = Mat::zeros(cols, cols);
    let zero_tol = singular_values[0] * 1e-300.max(f64::EPSILON) + f64::MIN_POSITIVE;
    let mut zero_cols = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let s = norms[j];
        if s > zero_tol && s > 0.0 {
            for i in 0..rows {
                *u.at_mut(i, k) = a.at(i, j) / s;
            }
        } else {
            zero_cols.push(k);
        }
        for i in 0..cols {
            *v_out.at_mut(i, k) = v_sorted.at(i, k);
        }
    }
    // Deterministic orthonormal completion for zero singular directions.
    for &k in &zero_cols {
        let mut filled = false;
        for cand in 0..rows {
            let mut col = vec![0.0; rows];
            col[cand] = 1.0;
            for j in 0..cols {
                if j == k || zero_cols.contains(&j) && j > k {
                    continue;
                }
                let proj: f64 = (0..rows).map(|i| u.at(i, j) * col[i]).sum();
                for i in 0..rows {
                    col[i] -= proj * u.at(i, j);
                }
            }
            let n = col.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                for i in 0..rows {
                    *u.at_mut(i, k) = col[i] / n;
                }
                filled = true;
                break;
            }
        }
        if !filled {
            return Err(LinalgError::SvdNoConvergence(JACOBI_MAX_SWEEPS));
        }
    }
    // Sign convention on U columns; V follows.
    for k in 0..cols {
        let mut best = 0usize;
        let mut best_abs = -1.0f64;
        for i in 0..rows {
            let a = u.at(i, k).abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if u.at(best, k) < 0.0 {
            for i in 0..rows {
                *u.at_mut(i, k) = -u.at(i, k);
            }
            for i in 0..cols {
                *v_out.at_mut(i, k) = -v_out.at(i, k);
            }
        }
    }
    Ok(SvdResult {
        u,
        singular_values,
        v: v_out,
    })
}

/// Numerical rank: singular values above RANK_EPS * sigma_1.
pub fn numerical_rank(m: &Mat) -> Result<usize, LinalgError> {
    let s = svd(m)?;
    let s1 = s.singular_values[0];
    if s1 == 0.0 {
        return Ok(0);
    }
    Ok(s
        .singular_values
        .iter()
        .filter(|&&x| x > RANK_EPS * s1)
        .count())
}

/// Thin Householder QR: Q (m x k), R (k x n) with k = min(m, n), QR = input.
/// R's diagonal is made non-negative for determinism.
pub fn qr(m: &Mat) -> (Mat, Mat) {
    let (rows, cols) = m.shape();
    let k = rows.min(cols);
    let mut r = m.clone();
    // Accumulate Q by applying the Householder reflectors to the identity.
    let mut q = Mat::zeros(rows, rows);
    for i in 0..rows {
        *q.at_mut(i, i) = 1.0;
    }
    for j in 0..k {
        // Householder vector for column j below the diagonal.
        let mut norm = 0.0;
        for i in j..rows {
            norm += r.at(i, j).powi(2);
        }
        let norm = norm.sqrt();
        if norm < 1e-300 {
            continue;
        }
        let alpha = if r.at(j, j) >= 0.0 { -norm } else { norm };
        let mut v = vec![0.0; rows];
        for i in j..rows {
            v[i] = r.at(i, j);
        }
        v[j] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 < 1e-300 {
            continue;
        }
        // r <- (I - 2vv^T/v^Tv) r ; q <- q (I - 2vv^T/v^Tv)
        for col in j..cols {
            let dot: f64 = (j..rows).map(|i| v[i] * r.at(i, col)).sum();
            let f = 2.0 * dot / vnorm2;
            for i in j..rows {
                *r.at_mut(i, col) -= f * v[i];
            }
        }
        for row in 0..rows {
            let dot: f64 = (j..rows).map(|i| q.at(row, i) * v[i]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in j..rows {
                *q.at_mut(row, i) -= f * v[i];
            }
        }
    }
    let mut q_thin = q.slice(0, rows, 0, k);
    let mut r_thin = r.slice(0, k, 0, cols);
    // Non-negative diagonal of R.
    for j in 0..k.min(cols) {
        if r_thin.at(j, j) < 0.0 {
            for c in 0..cols {
                *r_thin.at_mut(j, c) = -r_thin.at(j, c);
            }
            for i in 0..rows {
                *q_thin.at_mut(i, j) = -q_thin.at(i, j);
            }
        }
    }
    // Clean sub-diagonal round-off.
    for i in 0..k {
        for j in 0..i.min(cols) {
            *r_thin.at_mut(i, j) = 0.0;
        }
    }
    (q_thin, r_thin)
}

/// Left Moore-Penrose inverse (A^T A)^{-1} A^T for full-column-rank A.
pub fn pinv_left(a: &Mat) -> Result<Mat, LinalgError> {
    let s = svd(a)?;
    let k = s.singular_values.len();
    let s1 = s.singular_values[0];
    let smallest = s.singular_values[k - 1];
    if a.rows < a.cols || smallest <= 1e-10 * s1 {
        return Err(LinalgError::RankDeficient {
            smallest,
            threshold: 1e-10 * s1,
        });
    }
    // A^+ = V S^{-1} U^T
    let mut vs = s.v.clone();
    for j in 0..k {
        for i in 0..vs.rows {
            *vs.at_mut(i, j) /= s.singular_values[j];
        }
    }
    Ok(mm(&vs, &s.u.transpose()))
}

/// Solve the square system a x = b (b may have several columns) by LU with
/// partial pivoting.
pub fn solve(a: &Mat, b: &Mat) -> Result<Mat, LinalgError> {
    if a.rows != a.cols {
        return Err(LinalgError::DimensionMismatch(format!(
            "solve needs square a, got {}x{}",
            a.rows, a.cols
        )));
    }
    if a.rows != b.rows {
        return Err(LinalgError::DimensionMismatch(format!(
            "solve a {}x{} vs b {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let n = a.rows;
    let mut lu = a.clone();
    let mut x = b.clone();
    let mut piv: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let mut pk = col;
        let mut pmax = lu.at(col, col).abs();
        for i in (col + 1)..n {
            let v = lu.at(i, col).abs();
            if v > pmax {
                pmax = v;
                pk = i;
            }
        }
        if pmax < 1e-300 {
            return Err(LinalgError::SingularSystem);
        }
        if pk != col {
            for j in 0..n {
                let tmp = lu.at(col, j);
                *lu.at_mut(col, j) = lu.at(pk, j);
                *lu.at_mut(pk, j) = tmp;
            }
            for j in 0..x.cols {
                let tmp = x.at(col, j);
                *x.at_mut(col, j) = x.at(pk, j);
                *x.at_mut(pk, j) = tmp;
            }
            piv.swap(col, pk);
        }
        let d = lu.at(col, col);
        for i in (col + 1)..n {
            let f = lu.at(i, col) / d;
            *lu.at_mut(i, col) = f;
            if f != 0.0 {
                for j in (col + 1)..n {
                    *lu.at_mut(i, j) -= f * lu.at(col, j);
                }
                for j in 0..x.cols {
                    *x.at_mut(i, j) -= f * x.at(col, j);
                }
            }
        }
    }
    // Back substitution.
    for col in (0..n).rev() {
        let d = lu.at(col, col);
        for j in 0..x.cols {
            let mut v = x.at(col, j);
            for k in (col + 1)..n {
                v -= lu.at(col, k) * x.at(k, j);
            }
            *x.at_mut(col, j) = v / d;
        }
    }
    Ok(x)
}

/// Inverse of a square matrix.
pub fn inverse(a: &Mat) -> Result<Mat, LinalgError> {
    solve(a, &Mat::identity(a.rows))
}

/// Solve the Sylvester equation p*M + M*q = c for square r x r blocks via the
/// r^2 x r^2 vectorized system (I (x) p + q^T (x) I) vec(M) = vec(c), with
/// column-major vec. Valid while p and -q share no eigenvalues.
pub fn solve_sylvester(p: &Mat, q: &Mat, c: &Mat) -> Result<Mat, LinalgError> {
    let r = p.rows;
    if p.cols != r || q.rows != r || q.cols != r || c.rows != r || c.cols != r {
        return Err(LinalgError::DimensionMismatch(
            "sylvester blocks must all be r x r".into(),
        ));
    }
    let eye = Mat::identity(r);
    let k = kronecker(&eye, p).add(&kronecker(&q.transpose(), &eye));
    // Column-major vec of c.
    let mut rhs = Mat::zeros(r * r, 1);
    for j in 0..r {
        for i in 0..r {
            rhs.data[j * r + i] = c.at(i, j);
        }
    }
    let sol = solve(&k, &rhs)?;
    let mut m = Mat::zeros(r, r);
    for j in 0..r {
        for i in 0..r {
            *m.at_mut(i, j) = sol.data[j * r + i];
        }
    }
    Ok(m)
}

/// Kaiming-style uniform draw: entries i.i.d. U(-1/sqrt(fan_in), +1/sqrt(fan_in)).
pub fn kaiming_uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut RngStream) -> Mat {
    assert!(fan_in > 0, "fan_in must be positive");
    let bound = 1.0 / (fan_in as f64).sqrt();
    uniform_mat(rows, cols, bound, rng)
}

/// Entries i.i.d. U(-bound, +bound).
pub fn uniform_mat(rows: usize, cols: usize, bound: f64, rng: &mut RngStream) -> Mat {
    let data = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
    Mat::from_vec(rows, cols, data)
}

/// Entries i.i.d. N(0, std^2).
pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut RngStream) -> Mat {
    let data = (0..rows * cols).map(|_| rng.normal(0.0, std)).collect();
    Mat::from_vec(rows, cols, data)
}

/// Random matrix with exact rank `rank`: product of two full-rank factors.
pub fn random_low_rank(rows: usize, cols: usize, rank: usize, rng: &mut RngStream) -> Mat {
    let u = gaussian(rows, rank, 1.0, rng);
    let v = gaussian(rank, cols, 1.0, rng);
    mm(&u, &v)
}

/// Symmetric eigendecomposition of a symmetric PSD-ish matrix via the SVD of
/// the symmetrized input; returns (eigenvalues desc, eigenvector columns).
pub fn sym_eig(c: &Mat) -> Result<(Vec<f64>, Mat), LinalgError> {
    let sym = c.add(&c.transpose()).scale(0.5);
    let s = svd(&sym)?;
    // For symmetric PSD matrices the SVD is an eigendecomposition; recover the
    // eigenvalue sign from the Rayleigh quotient.
    let mut vals = s.singular_values.clone();
    for (j, v) in vals.iter_mut().enumerate() {
        let u_j = s.u.slice(0, sym.rows, j, j + 1);
        let cu = mm(&sym, &u_j);
        let rayleigh = u_j.dot(&cu);
        if rayleigh < 0.0 {
            *v = -*v;
        }
    }
    Ok((vals, s.u))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_mat(r: usize, c: usize, rng: &mut RngStream) -> Mat {
        gaussian(r, c, 1.0, rng)
    }

    #[test]
    fn matmul_identity() {
        let mut rng = RngStream::new(1);
        let m = rand_mat(2, 3, &mut rng);
        let out = matmul(&Mat::identity(2), &m).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn matmul_hand_2x2() {
        let a = Mat::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Mat::from_rows(&[&[0.0], &[1.0]]);
        let out = matmul(&a, &b).unwrap();
        assert_eq!(out.data, vec![2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = RngStream::new(2);
        let a = rand_mat(5, 3, &mut rng);
        let b = rand_mat(3, 4, &mut rng);
        let fast = matmul(&a, &b).unwrap();
        let mut slow = Mat::zeros(5, 4);
        for i in 0..5 {
            for j in 0..4 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += a.at(i, k) * b.at(k, j);
                }
                *slow.at_mut(i, j) = acc;
            }
        }
        assert!(fast.sub(&slow).max_abs() <= 1e-12);
    }

    #[test]
    fn matmul_dimension_error() {
        let a = Mat::zeros(2, 3);
        let b = Mat::zeros(2, 3);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn hadamard_ones_and_zeros() {
        let mut rng = RngStream::new(3);
        let m = rand_mat(4, 5, &mut rng);
        assert_eq!(hadamard(&m, &Mat::ones(4, 5)).unwrap(), m);
        assert_eq!(
            hadamard(&m, &Mat::zeros(4, 5)).unwrap(),
            Mat::zeros(4, 5)
        );
        assert!(hadamard(&m, &Mat::zeros(5, 4)).is_err());
    }

    #[test]
    fn hadamard_rank_bound() {
        let mut rng = RngStream::new(4);
        let a = random_low_rank(8, 8, 2, &mut rng);
        let b = random_low_rank(8, 8, 3, &mut rng);
        let h = hadamard(&a, &b).unwrap();
        assert!(numerical_rank(&h).unwrap() <= 6);
    }

    #[test]
    fn kronecker_identity_and_hand() {
        let mut rng = RngStream::new(5);
        let m = rand_mat(3, 2, &mut rng);
        assert_eq!(kronecker(&Mat::identity(1), &m), m);
        let a = Mat::from_rows(&[&[1.0, 2.0]]);
        let b = Mat::from_rows(&[&[0.0, 1.0]]);
        assert_eq!(kronecker(&a, &b).data, vec![0.0, 1.0, 0.0, 2.0]);
    }

    #[test]
    fn kronecker_rank_multiplies() {
        let mut rng = RngStream::new(6);
        let a = rand_mat(3, 2, &mut rng); // full rank 2
        let b = rand_mat(2, 4, &mut rng); // full rank 2
        let ra = numerical_rank(&a).unwrap();
        let rb = numerical_rank(&b).unwrap();
        assert_eq!(numerical_rank(&kronecker(&a, &b)).unwrap(), ra * rb);
    }

    #[test]
    fn block_diag_cases() {
        let mut rng = RngStream::new(7);
        let m = rand_mat(3, 2, &mut rng);
        assert_eq!(block_diag(&[m.clone()]).unwrap(), m);
        assert!(block_diag(&[]).is_err());

        let b1 = random_low_rank(4, 2, 2, &mut rng);
        let b2 = random_low_rank(4, 2, 2, &mut rng);
        let bd = block_diag(&[b1, b2]).unwrap();
        assert_eq!(bd.shape(), (8, 4));
        assert_eq!(numerical_rank(&bd).unwrap(), 4);

        let s1 = rand_mat(2, 3, &mut rng);
        let s2 = rand_mat(1, 1, &mut rng);
        let bd2 = block_diag(&[s1.clone(), s2.clone()]).unwrap();
        assert_eq!(bd2.shape(), (3, 4));
        assert_eq!(bd2.at(0, 3), 0.0);
        assert_eq!(bd2.at(2, 0), 0.0);
        assert_eq!(bd2.at(2, 3), s2.at(0, 0));
    }

    #[test]
    fn svd_diag() {
        let m = Mat::diag(&[3.0, 1.0]);
        let s = svd(&m).unwrap();
        assert!((s.singular_values[0] - 3.0).abs() < 1e-12);
        assert!((s.singular_values[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn svd_reconstructs_random() {
        let mut rng = RngStream::new(8);
        let m = rand_mat(6, 4, &mut rng);
        let s = svd(&m).unwrap();
        let err = s.reconstruct().sub(&m).frob_norm();
        assert!(err <= 1e-9 * m.frob_norm(), "err {err}");
        // Orthonormality.
        let utu = mm(&s.u.transpose(), &s.u).sub(&Mat::identity(4));
        let vtv = mm(&s.v.transpose(), &s.v).sub(&Mat::identity(4));
        assert!(utu.max_abs() < 1e-10);
        assert!(vtv.max_abs() < 1e-10);
        // Descending order.
        for w in s.singular_values.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn svd_rank_one_outer_product() {
        let mut rng = RngStream::new(9);
        let u = gaussian(5, 1, 1.0, &mut rng);
        let v = gaussian(1, 4, 1.0, &mut rng);
        let m = mm(&u, &v);
        let s = svd(&m).unwrap();
        let expect = u.frob_norm() * v.frob_norm();
        assert!((s.singular_values[0] - expect).abs() < 1e-10 * expect);
        for &sv in &s.singular_values[1..] {
            assert!(sv < 1e-10 * expect);
        }
        // Orthonormal U even with zero singular directions.
        let utu = mm(&s.u.transpose(), &s.u).sub(&Mat::identity(4));
        assert!(utu.max_abs() < 1e-10);
    }

    #[test]
    fn svd_wide_matrix() {
        let mut rng = RngStream::new(10);
        let m = rand_mat(3, 7, &mut rng);
        let s = svd(&m).unwrap();
        assert_eq!(s.u.shape(), (3, 3));
        assert_eq!(s.v.shape(), (7, 3));
        assert!(s.reconstruct().sub(&m).frob_norm() <= 1e-9 * m.frob_norm());
    }

    #[test]
    fn svd_deterministic_bit_identical() {
        let mut rng = RngStream::new(11);
        let m = rand_mat(8, 5, &mut rng);
        let s1 = svd(&m).unwrap();
        let s2 = svd(&m).unwrap();
        assert_eq!(s1.u.data, s2.u.data);
        assert_eq!(s1.v.data, s2.v.data);
        assert_eq!(s1.singular_values, s2.singular_values);
    }

    #[test]
    fn svd_sign_convention() {
        let mut rng = RngStream::new(12);
        let m = rand_mat(6, 3, &mut rng);
        let s = svd(&m).unwrap();
        for j in 0..3 {
            let col = s.u.col(j);
            let best = col
                .iter()
                .cloned()
                .fold(0.0f64, |acc: f64, x| if x.abs() > acc.abs() { x } else { acc });
            assert!(best >= 0.0);
        }
    }

    #[test]
    fn eckart_young_tail() {
        let mut rng = RngStream::new(13);
        let m = rand_mat(7, 5, &mut rng);
        let s = svd(&m).unwrap();
        for r in 0..=5 {
            let resid = m.sub(&s.truncate(r)).frob_norm().powi(2);
            let tail: f64 = s.singular_values[r.min(5)..].iter().map(|x| x * x).sum();
            assert!(
                (resid - tail).abs() <= 1e-9 * (1.0 + tail),
                "r={r} resid={resid} tail={tail}"
            );
        }
    }

    #[test]
    fn qr_identity_and_reconstruction() {
        let (q, r) = qr(&Mat::identity(4));
        assert!(q.sub(&Mat::identity(4)).max_abs() < 1e-12);
        assert!(r.sub(&Mat::identity(4)).max_abs() < 1e-12);

        let mut rng = RngStream::new(14);
        let m = rand_mat(5, 5, &mut rng);
        let (q, r) = qr(&m);
        assert!(mm(&q, &r).sub(&m).max_abs() < 1e-10);
        let qtq = mm(&q.transpose(), &q).sub(&Mat::identity(5));
        assert!(qtq.max_abs() < 1e-10);
        // Upper triangular.
        for i in 0..5 {
            for j in 0..i {
                assert_eq!(r.at(i, j), 0.0);
            }
        }
    }

    #[test]
    fn qr_column_scaled_identity() {
        let m = Mat::diag(&[2.0, 5.0, 0.5]);
        let (_q, r) = qr(&m);
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    assert!((r.at(i, j) - m.at(i, i)).abs() < 1e-12);
                } else {
                    assert!(r.at(i, j).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn qr_tall() {
        let mut rng = RngStream::new(15);
        let m = rand_mat(6, 3, &mut rng);
        let (q, r) = qr(&m);
        assert_eq!(q.shape(), (6, 3));
        assert_eq!(r.shape(), (3, 3));
        assert!(mm(&q, &r).sub(&m).max_abs() < 1e-10);
    }

    #[test]
    fn pinv_orthonormal_is_transpose() {
        let mut rng = RngStream::new(16);
        let m = rand_mat(8, 3, &mut rng);
        let (q, _) = qr(&m);
        let p = pinv_left(&q).unwrap();
        assert!(p.sub(&q.transpose()).max_abs() < 1e-9);
    }

    #[test]
    fn pinv_left_identity_residual() {
        let mut rng = RngStream::new(17);
        let a = rand_mat(8, 3, &mut rng);
        let p = pinv_left(&a).unwrap();
        let res = mm(&p, &a).sub(&Mat::identity(3));
        assert!(res.max_abs() <= 1e-9);
    }

    #[test]
    fn pinv_scaled_identity() {
        let a = Mat::diag(&[2.0, 2.0, 2.0]);
        let p = pinv_left(&a).unwrap();
        assert!(p.sub(&Mat::identity(3).scale(0.5)).max_abs() < 1e-12);
    }

    #[test]
    fn pinv_rank_deficient_rejected() {
        let mut rng = RngStream::new(18);
        let a = random_low_rank(6, 3, 2, &mut rng);
        assert!(matches!(
            pinv_left(&a),
            Err(LinalgError::RankDeficient { .. })
        ));
    }

    #[test]
    fn sylvester_identity_case() {
        let c = Mat::identity(3).scale(2.0);
        let m = solve_sylvester(&Mat::identity(3), &Mat::identity(3), &c).unwrap();
        assert!(m.sub(&Mat::identity(3)).max_abs() < 1e-12);
    }

    #[test]
    fn sylvester_random_spd_substitute_back() {
        let mut rng = RngStream::new(19);
        for _ in 0..5 {
            let x = rand_mat(4, 4, &mut rng);
            let p = mm(&x.transpose(), &x).add(&Mat::identity(4).scale(0.1));
            let y = rand_mat(4, 4, &mut rng);
            let q = mm(&y.transpose(), &y).add(&Mat::identity(4).scale(0.1));
            let c = rand_mat(4, 4, &mut rng);
            let m = solve_sylvester(&p, &q, &c).unwrap();
            let resid = mm(&p, &m).add(&mm(&m, &q)).sub(&c).frob_norm();
            assert!(resid <= 1e-8 * c.frob_norm(), "resid {resid}");
        }
    }

    #[test]
    fn sylvester_zero_rhs() {
        let mut rng = RngStream::new(20);
        let x = rand_mat(3, 3, &mut rng);
        let p = mm(&x.transpose(), &x).add(&Mat::identity(3));
        let m = solve_sylvester(&p, &p, &Mat::zeros(3, 3)).unwrap();
        assert!(m.max_abs() < 1e-12);
    }

    #[test]
    fn sylvester_shared_eigenvalue_fails() {
        // p = 1, q = -1 -> I(x)p + q^T(x)I = 0, singular.
        let p = Mat::from_rows(&[&[1.0]]);
        let q = Mat::from_rows(&[&[-1.0]]);
        let c = Mat::from_rows(&[&[1.0]]);
        assert!(solve_sylvester(&p, &q, &c).is_err());
    }

    #[test]
    fn kaiming_bounds_and_determinism() {
        let mut r1 = RngStream::new(21);
        let mut r2 = RngStream::new(21);
        let a = kaiming_uniform(10, 10, 64, &mut r1);
        let b = kaiming_uniform(10, 10, 64, &mut r2);
        assert_eq!(a.data, b.data);
        let bound = 1.0 / 8.0;
        assert!(a.data.iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn draw_statistics() {
        let mut rng = RngStream::new(22);
        let n = 1_000_000usize;
        let m = kaiming_uniform(1000, 1000, 100, &mut rng);
        let mean = m.data.iter().sum::<f64>() / n as f64;
        let sigma = 0.1 / (3.0f64).sqrt(); // std of U(-0.1, 0.1)
        assert!(mean.abs() <= 3.0 * sigma / 1e3, "mean {mean}");

        let g = gaussian(1000, 100, 0.5, &mut rng);
        let gm = g.data.iter().sum::<f64>() / 1e5;
        assert!(gm.abs() <= 3.0 * 0.5 / (1e5f64).sqrt() * 1.5, "gmean {gm}");
    }

    #[test]
    fn sym_eig_recovers_spectrum() {
        let mut rng = RngStream::new(23);
        let x = rand_mat(6, 6, &mut rng);
        let c = mm(&x.transpose(), &x);
        let (vals, vecs) = sym_eig(&c).unwrap();
        for j in 0..6 {
            let v = vecs.slice(0, 6, j, j + 1);
            let cv = mm(&c, &v);
            assert!(cv.sub(&v.scale(vals[j])).max_abs() < 1e-8 * (1.0 + vals[0]));
        }
    }

    #[test]
    fn roll_rows_periodicity() {
        let mut rng = RngStream::new(24);
        let m = rand_mat(6, 3, &mut rng);
        assert_eq!(m.roll_rows(0), m);
        assert_eq!(m.roll_rows(3).roll_rows(3), m);
        assert_eq!(m.roll_rows(6), m);
    }
}
