//! Independent reference implementations used as test oracles. Nothing here
//! calls into the crate's own decompositions.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unlearn_core::linalg::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn random_vector(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Naive triple loop.
pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for p in 0..a.cols() {
                s += a.row(i)[p] * b.row(p)[j];
            }
            out.row_mut(i)[j] = s;
        }
    }
    out
}

pub fn naive_transpose(a: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.cols(), a.rows());
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            out.row_mut(j)[i] = a.row(i)[j];
        }
    }
    out
}

pub fn frob(a: &Matrix) -> f64 {
    a.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn frob_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Eigenvalues of a symmetric matrix by brute-force cyclic Jacobi rotations,
/// sorted in descending order.
pub fn symmetric_eigenvalues(a: &Matrix) -> Vec<f64> {
    let n = a.rows();
    assert_eq!(n, a.cols());
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
    eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
    eig
}

/// Classical Gram-Schmidt on the columns of a random matrix.
pub fn random_orthonormal(rng: &mut impl Rng, n: usize, k: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < k {
        let mut v = random_vector(rng, n);
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= d * y;
            }
        }
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nv > 1e-6 {
            basis.push(v.into_iter().map(|x| x / nv).collect());
        }
    }
    basis
}

/// `B Bᵀ` for a list of basis vectors.
pub fn projector(basis: &[Vec<f64>], n: usize) -> Matrix {
    let mut p = Matrix::zeros(n, n);
    for b in basis {
        for i in 0..n {
            for j in 0..n {
                p.row_mut(i)[j] += b[i] * b[j];
            }
        }
    }
    p
}

/// `Σ s_i u_i v_iᵀ`.
pub fn outer_sum(us: &[Vec<f64>], s: &[f64], vs: &[Vec<f64>]) -> Matrix {
    let (m, n) = (us[0].len(), vs[0].len());
    let mut out = Matrix::zeros(m, n);
    for ((u, &si), v) in us.iter().zip(s).zip(vs) {
        for i in 0..m {
            for j in 0..n {
                out.row_mut(i)[j] += si * u[i] * v[j];
            }
        }
    }
    out
}

pub fn unit(n: usize, i: usize) -> Vec<f64> {
    let mut e = vec![0.0; n];
    e[i] = 1.0;
    e
}
