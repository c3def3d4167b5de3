//! Dense real linear algebra on row-major `f64` matrices.
//!
//! Everything the subspace algebra needs lives here: products, norms,
//! a one-sided Jacobi SVD, Gram-Schmidt style projection and SVD
//! reconstruction. All functions are pure.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Default relative truncation threshold for retained singular values.
pub const DEFAULT_SVD_TOL: f64 = 1e-8;

/// Off-diagonal threshold at which a Jacobi sweep counts as converged.
pub const JACOBI_CONVERGENCE: f64 = 1e-13;

/// Hard cap on the number of cyclic Jacobi sweeps.
pub const JACOBI_MAX_SWEEPS: usize = 60;

/// Basis vectors with squared norm below this are ignored by [`project_out`].
pub const NEGLIGIBLE_SQUARED_NORM: f64 = 1e-30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(invalid("matrix data contains a non-finite entry"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(invalid("ragged rows"));
        }
        Self::from_vec(n, m, rows.concat())
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns(rows: usize, columns: &[Vec<f64>]) -> Result<Self> {
        let mut m = Self::zeros(rows, columns.len());
        for (j, c) in columns.iter().enumerate() {
            if c.len() != rows {
                return Err(invalid(format!(
                    "column {j} has length {}, expected {rows}",
                    c.len()
                )));
            }
            for (i, &v) in c.iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        Ok(m)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        debug_assert_eq!(values.len(), self.rows);
        for (i, &v) in values.iter().enumerate() {
            self[(i, j)] = v;
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.shape() == other.shape()
    }

    pub fn scaled(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * factor).collect(),
        }
    }

    /// `self += factor * other`
    pub fn add_scaled(&mut self, other: &Matrix, factor: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(invalid(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn sum(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = self.clone();
        out.add_scaled(other, 1.0)?;
        Ok(out)
    }

    pub fn difference(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = self.clone();
        out.add_scaled(other, -1.0)?;
        Ok(out)
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// `self · other`, panicking on a shape mismatch. Internal hot path.
    pub(crate) fn mul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm_nn(self, other, &mut out);
        out
    }

    /// `selfᵀ · other`.
    pub(crate) fn t_mul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm_tn_acc(self, other, &mut out);
        out
    }

    /// `self · otherᵀ`.
    pub(crate) fn mul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.rows);
        // other viewed as its transpose through swapped strides
        gemm(self, (self.cols, 1), other, (1, other.cols), self.rows, self.cols, other.rows, 0.0, &mut out);
        out
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

fn gemm_nn(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    gemm(a, (a.cols, 1), b, (b.cols, 1), a.rows, a.cols, b.cols, 0.0, out);
}

/// `out += aᵀ · b`
pub(crate) fn gemm_tn_acc(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    debug_assert_eq!(a.rows, b.rows);
    debug_assert_eq!(out.shape(), (a.cols, b.cols));
    gemm(a, (1, a.cols), b, (b.cols, 1), a.cols, a.rows, b.cols, 1.0, out);
}

/// `out = beta·out + op(a)·op(b)` where `op` is expressed through the given
/// (row, column) strides; `op(a)` is `m × k`, `op(b)` is `k × n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    a: &Matrix,
    a_strides: (usize, usize),
    b: &Matrix,
    b_strides: (usize, usize),
    m: usize,
    k: usize,
    n: usize,
    beta: f64,
    out: &mut Matrix,
) {
    assert_eq!(out.shape(), (m, n));
    assert!(a.data.len() >= m * k && b.data.len() >= k * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the strides describe `m×k` and `k×n` views lying entirely
    // within `a.data` and `b.data` (checked above against the row-major
    // layouts the callers pass), and `out` is an exclusively borrowed,
    // contiguous `m×n` row-major buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.data.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Standard matrix product.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(invalid(format!(
            "matmul dimension mismatch: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(a.mul(b))
}

pub fn frobenius_norm(a: &Matrix) -> f64 {
    a.data.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Singular value factors `u · diag(s) · vᵀ` truncated to rank `s.len()`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvdFactors {
    /// `m × r`, columns are left singular vectors.
    pub u: Matrix,
    /// Non-negative, non-increasing.
    pub s: Vec<f64>,
    /// `n × r`, columns are right singular vectors.
    pub v: Matrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn left_vectors(&self) -> Vec<Vec<f64>> {
        (0..self.rank()).map(|j| self.u.column(j)).collect()
    }

    pub fn right_vectors(&self) -> Vec<Vec<f64>> {
        (0..self.rank()).map(|j| self.v.column(j)).collect()
    }
}

/// One-sided (Hestenes) Jacobi SVD.
///
/// Retains singular values strictly greater than `tol × σ_max`. The sign of
/// each pair is fixed so the largest-magnitude entry of every left singular
/// vector is non-negative.
pub fn svd(a: &Matrix, tol: f64) -> Result<SvdFactors> {
    if !(tol > 0.0) || !tol.is_finite() {
        return Err(invalid(format!("svd tolerance must be positive, got {tol}")));
    }
    if !a.is_finite() {
        return Err(invalid("svd input contains non-finite entries"));
    }
    if a.rows < a.cols {
        // A = (Aᵀ)ᵀ = (U S Vᵀ)ᵀ = V S Uᵀ
        let t = jacobi_tall(&a.transpose(), tol)?;
        let mut f = SvdFactors {
            u: t.v,
            s: t.s,
            v: t.u,
        };
        fix_signs(&mut f);
        return Ok(f);
    }
    let mut f = jacobi_tall(a, tol)?;
    fix_signs(&mut f);
    Ok(f)
}

/// Jacobi on a matrix with `rows >= cols`, operating on columns.
fn jacobi_tall(a: &Matrix, tol: f64) -> Result<SvdFactors> {
    let m = a.rows;
    let n = a.cols;
    // Column-major working copies: cols[j] is column j.
    let mut work: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut vecs: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let fro2: f64 = a.data.iter().map(|x| x * x).sum();
    if fro2 == 0.0 {
        return Ok(SvdFactors {
            u: Matrix::zeros(m, 0),
            s: Vec::new(),
            v: Matrix::zeros(n, 0),
        });
    }
    // Columns this small relative to ‖A‖_F carry nothing above round-off;
    // rotating them against each other only chases noise.
    let floor = fro2 * 1e-30;

    let mut converged = false;
    let mut residual = f64::INFINITY;
    for _ in 0..JACOBI_MAX_SWEEPS {
        residual = 0.0;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let cp = &work[p];
                    let cq = &work[q];
                    (dot(cp, cp), dot(cq, cq), dot(cp, cq))
                };
                if alpha <= floor || beta <= floor {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(off);
                if off <= JACOBI_CONVERGENCE {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut work, p, q, c, s);
                rotate(&mut vecs, p, q, c, s);
            }
        }
        if residual <= JACOBI_CONVERGENCE {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical {
            message: format!("jacobi svd did not converge in {JACOBI_MAX_SWEEPS} sweeps"),
            residual,
        });
    }

    let mut order: Vec<(f64, usize)> = work.iter().enumerate().map(|(j, c)| (norm(c), j)).collect();
    order.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    let smax = order[0].0;
    let kept: Vec<(f64, usize)> = order
        .into_iter()
        .filter(|&(s, _)| s > tol * smax && s > 0.0)
        .collect();

    let r = kept.len();
    let mut u = Matrix::zeros(m, r);
    let mut v = Matrix::zeros(n, r);
    let mut s = Vec::with_capacity(r);
    for (out_j, &(sigma, j)) in kept.iter().enumerate() {
        let uj: Vec<f64> = work[j].iter().map(|x| x / sigma).collect();
        u.set_column(out_j, &uj);
        v.set_column(out_j, &vecs[j]);
        s.push(sigma);
    }
    Ok(SvdFactors { u, s, v })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let cp = &mut lo[p];
    let cq = &mut hi[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

fn fix_signs(f: &mut SvdFactors) {
    for j in 0..f.rank() {
        let mut best = 0.0f64;
        let mut best_val = 0.0;
        for i in 0..f.u.rows() {
            let x = f.u[(i, j)];
            if x.abs() > best {
                best = x.abs();
                best_val = x;
            }
        }
        if best_val < 0.0 {
            for i in 0..f.u.rows() {
                f.u[(i, j)] = -f.u[(i, j)];
            }
            for i in 0..f.v.rows() {
                f.v[(i, j)] = -f.v[(i, j)];
            }
        }
    }
}

/// Removes from `v` its components along each basis vector:
/// `v' = v − Σ_j (⟨v,u_j⟩ / ⟨u_j,u_j⟩) u_j`, all coefficients taken
/// against the original `v`.
pub fn project_out(v: &[f64], basis: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut out = v.to_vec();
    for (j, u) in basis.iter().enumerate() {
        if u.len() != v.len() {
            return Err(invalid(format!(
                "basis vector {j} has length {}, expected {}",
                u.len(),
                v.len()
            )));
        }
        let uu = dot(u, u);
        if uu < NEGLIGIBLE_SQUARED_NORM {
            continue;
        }
        let coeff = dot(v, u) / uu;
        if coeff == 0.0 {
            continue;
        }
        for (o, &x) in out.iter_mut().zip(u) {
            *o -= coeff * x;
        }
    }
    Ok(out)
}

/// `u · diag(s) · vᵀ`
pub fn reconstruct(f: &SvdFactors) -> Result<Matrix> {
    let r = f.s.len();
    if f.u.cols() != r || f.v.cols() != r {
        return Err(invalid(format!(
            "inconsistent factors: u has {} columns, v has {}, {} singular values",
            f.u.cols(),
            f.v.cols(),
            r
        )));
    }
    let mut us = f.u.clone();
    for i in 0..us.rows() {
        for (x, s) in us.row_mut(i).iter_mut().zip(&f.s) {
            *x *= s;
        }
    }
    Ok(us.mul_t(&f.v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_small_case() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Matrix::identity(2), &a).unwrap(), a);
        let b = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c, Matrix::from_rows(&[vec![2.0], vec![4.0]]).unwrap());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(8, 8, &mut rng);
        let b = random(8, 8, &mut rng);
        let fast = matmul(&a, &b).unwrap();
        let slow = naive(&a, &b);
        assert!(frobenius_norm(&fast.difference(&slow).unwrap()) < 1e-12);
        assert!(frobenius_norm(&a.t_mul(&b).difference(&naive(&a.transpose(), &b)).unwrap()) < 1e-12);
        assert!(frobenius_norm(&a.mul_t(&b).difference(&naive(&a, &b.transpose())).unwrap()) < 1e-12);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn frobenius_cases() {
        assert_eq!(frobenius_norm(&Matrix::zeros(3, 3)), 0.0);
        assert!((frobenius_norm(&Matrix::identity(3)) - 3f64.sqrt()).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(5, 5, &mut rng);
        let mut acc = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                acc += a[(i, j)] * a[(i, j)];
            }
        }
        assert!((frobenius_norm(&a) - acc.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn svd_of_diagonal() {
        let f = svd(&Matrix::diag(&[3.0, 2.0, 1.0]), DEFAULT_SVD_TOL).unwrap();
        assert_eq!(f.s, vec![3.0, 2.0, 1.0]);
        assert_eq!(f.u, Matrix::identity(3));
        assert_eq!(f.v, Matrix::identity(3));
        assert_eq!(reconstruct(&f).unwrap(), Matrix::diag(&[3.0, 2.0, 1.0]));
    }

    #[test]
    fn svd_of_unsorted_diagonal_sorts() {
        let f = svd(&Matrix::diag(&[1.0, -5.0, 2.0]), DEFAULT_SVD_TOL).unwrap();
        assert_eq!(f.s, vec![5.0, 2.0, 1.0]);
        let r = reconstruct(&f).unwrap();
        assert_eq!(r, Matrix::diag(&[1.0, -5.0, 2.0]));
    }

    #[test]
    fn svd_of_zero_is_empty() {
        let f = svd(&Matrix::zeros(4, 4), DEFAULT_SVD_TOL).unwrap();
        assert_eq!(f.rank(), 0);
        assert_eq!(f.u.shape(), (4, 0));
        assert_eq!(reconstruct(&f).unwrap(), Matrix::zeros(4, 4));
    }

    #[test]
    fn svd_rejects_bad_tolerance() {
        assert!(svd(&Matrix::identity(2), 0.0).is_err());
        assert!(svd(&Matrix::identity(2), f64::NAN).is_err());
    }

    #[test]
    fn svd_rectangular_both_orientations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(r, c) in &[(7, 3), (3, 7)] {
            let a = random(r, c, &mut rng);
            let f = svd(&a, 1e-12).unwrap();
            assert_eq!(f.rank(), 3);
            assert_eq!(f.u.shape(), (r, 3));
            assert_eq!(f.v.shape(), (c, 3));
            let err = frobenius_norm(&reconstruct(&f).unwrap().difference(&a).unwrap());
            assert!(err / frobenius_norm(&a) < 1e-12);
        }
    }

    #[test]
    fn svd_truncates_low_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random(12, 3, &mut rng);
        let g = random(3, 12, &mut rng);
        let t = f.mul(&g);
        let s = svd(&t, DEFAULT_SVD_TOL).unwrap();
        assert_eq!(s.rank(), 3);
        let err = frobenius_norm(&reconstruct(&s).unwrap().difference(&t).unwrap());
        assert!(err / frobenius_norm(&t) < 1e-10);
    }

    #[test]
    fn svd_sign_convention() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(6, 6, &mut rng);
        let f = svd(&a, 1e-12).unwrap();
        for j in 0..f.rank() {
            let col = f.u.column(j);
            let max = col.iter().fold(0.0f64, |m, x| if x.abs() > m.abs() { *x } else { m });
            assert!(max >= 0.0);
        }
    }

    #[test]
    fn project_out_cases() {
        let h = 0.5f64.sqrt();
        let p = project_out(&[h, h], &[vec![1.0, 0.0]]).unwrap();
        assert_eq!(p, vec![0.0, h]);
        let v = vec![0.0, 0.0, 3.0];
        let basis = vec![vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0]];
        assert_eq!(project_out(&v, &basis).unwrap(), v);
        assert_eq!(project_out(&v, &[]).unwrap(), v);
        assert!(project_out(&v, &[vec![1.0]]).is_err());
        // negligible basis vectors are skipped
        assert_eq!(project_out(&[1.0, 1.0], &[vec![1e-16, 0.0]]).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn project_out_matches_explicit_projector() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = svd(&random(8, 3, &mut rng), 1e-12).unwrap().u;
        let basis: Vec<Vec<f64>> = (0..3).map(|j| q.column(j)).collect();
        let v: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let projector = Matrix::identity(8).difference(&q.mul_t(&q)).unwrap();
        let vm = Matrix::from_vec(8, 1, v.clone()).unwrap();
        let expected = projector.mul(&vm).into_vec();
        let got = project_out(&v, &basis).unwrap();
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reconstruct_rejects_inconsistent_factors() {
        let f = SvdFactors {
            u: Matrix::zeros(3, 2),
            s: vec![1.0],
            v: Matrix::zeros(3, 1),
        };
        assert!(reconstruct(&f).is_err());
    }
}
