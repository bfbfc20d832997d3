//! Small dense linear-algebra helpers on top of `nalgebra`, plus a row-sparse
//! matrix used to exploit the structure of transition and loading matrices.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    symmetrize(&mut out);
    out
}

/// Symmetric eigen-decomposition `(eigenvalues, eigenvectors)`.
pub fn sym_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = symmetrized(m).symmetric_eigen();
    (eig.eigenvalues, eig.eigenvectors)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::INFINITY;
    }
    sym_eigen(m).0.min()
}

/// Applies `f` to the eigenvalues of a symmetric matrix.
pub fn sym_apply(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen(m);
    let mapped = DVector::from_iterator(vals.len(), vals.iter().map(|&v| f(v)));
    let scaled = &vecs * DMatrix::from_diagonal(&mapped);
    let mut out = scaled * vecs.transpose();
    symmetrize(&mut out);
    out
}

/// Symmetric PSD square root; negative eigenvalues from round-off are clipped.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    sym_apply(m, |v| v.max(0.0).sqrt())
}

pub fn sym_inv_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (vals, _) = sym_eigen(m);
    if vals.iter().any(|&v| v <= 0.0) {
        return Err(Error::NotPositiveDefinite(
            "inverse square root of a non-PD matrix".into(),
        ));
    }
    Ok(sym_apply(m, |v| 1.0 / v.sqrt()))
}

/// Lower Cholesky factor of an SPD matrix.
pub fn cholesky_lower(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    nalgebra::Cholesky::new(symmetrized(m))
        .map(|c| c.l())
        .ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if m.is_empty() {
        return Ok(m.clone());
    }
    let chol = nalgebra::Cholesky::new(symmetrized(m))
        .ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))?;
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

pub fn log_det_spd(m: &DMatrix<f64>, what: &str) -> Result<f64> {
    let l = cholesky_lower(m, what)?;
    Ok(2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Square root factor of a PSD matrix usable for sampling (`S S' = m`).
/// Falls back to the eigen square root when Cholesky fails (singular input).
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    match nalgebra::Cholesky::new(symmetrized(m)) {
        Some(c) => c.l(),
        None => sym_sqrt(m),
    }
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let scale = m.amax().max(1.0);
    (0..m.nrows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol * scale))
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Column-stacking `vec` operator.
pub fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

pub fn unvec(v: &DVector<f64>, nrows: usize, ncols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(nrows, ncols, v.as_slice())
}

/// Largest eigenvalue modulus of a general square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

pub fn standard_normal_vector<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Draw from `N(mean, factor factor')`.
pub fn gaussian_draw<R: Rng + ?Sized>(
    rng: &mut R,
    mean: &DVector<f64>,
    factor: &DMatrix<f64>,
) -> DVector<f64> {
    let z = standard_normal_vector(rng, factor.ncols());
    mean + factor * z
}

/// Log density of `N(0, cov)` at `x` given the Cholesky factor of `cov`.
pub fn gaussian_log_density_chol(x: &DVector<f64>, chol_lower: &DMatrix<f64>) -> f64 {
    let k = x.len() as f64;
    let solved = chol_lower
        .solve_lower_triangular(x)
        .expect("triangular factor with positive diagonal");
    let log_det: f64 = 2.0 * chol_lower.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    -0.5 * (k * (2.0 * std::f64::consts::PI).ln() + log_det + solved.norm_squared())
}

/// Row-sparse matrix: only the structurally non-zero entries of each row.
#[derive(Debug, Clone)]
pub struct SparseRows {
    nrows: usize,
    ncols: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let rows = (0..m.nrows())
            .map(|i| {
                (0..m.ncols())
                    .filter(|&j| m[(i, j)] != 0.0)
                    .map(|j| (j, m[(i, j)]))
                    .collect()
            })
            .collect();
        SparseRows {
            nrows: m.nrows(),
            ncols: m.ncols(),
            rows,
        }
    }

    /// Keeps only the listed rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        SparseRows {
            nrows: rows.len(),
            ncols: self.ncols,
            rows: rows.iter().map(|&r| self.rows[r].clone()).collect(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    /// `self * b`
    pub fn mul_dense(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows, b.ncols());
        for (i, row) in self.rows.iter().enumerate() {
            for &(k, v) in row {
                for j in 0..b.ncols() {
                    out[(i, j)] += v * b[(k, j)];
                }
            }
        }
        out
    }

    /// `a * self'`
    pub fn dense_mul_t(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(a.nrows(), self.nrows);
        for (j, row) in self.rows.iter().enumerate() {
            for &(k, v) in row {
                for i in 0..a.nrows() {
                    out[(i, j)] += a[(i, k)] * v;
                }
            }
        }
        out
    }

    /// `a * self`
    pub fn dense_mul(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(a.nrows(), self.ncols);
        for (k, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                for i in 0..a.nrows() {
                    out[(i, j)] += a[(i, k)] * v;
                }
            }
        }
        out
    }

    /// `self' * b`
    pub fn t_mul_dense(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.ncols, b.ncols());
        for (k, row) in self.rows.iter().enumerate() {
            for &(i, v) in row {
                for j in 0..b.ncols() {
                    out[(i, j)] += v * b[(k, j)];
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.nrows,
            self.rows
                .iter()
                .map(|row| row.iter().map(|&(k, v)| v * x[k]).sum()),
        )
    }

    pub fn t_mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.ncols);
        for (k, row) in self.rows.iter().enumerate() {
            for &(i, v) in row {
                out[i] += v * x[k];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| {
            if rng.random::<f64>() < 0.4 {
                0.0
            } else {
                rng.sample(StandardNormal)
            }
        })
    }

    #[test]
    fn sparse_products_match_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random(&mut rng, 6, 4);
        let sp = SparseRows::from_dense(&s);
        let b = random(&mut rng, 4, 3);
        let a = random(&mut rng, 5, 4);
        let a6 = random(&mut rng, 5, 6);
        let b6 = random(&mut rng, 6, 2);
        assert!((sp.mul_dense(&b) - &s * &b).amax() < 1e-12);
        assert!((sp.dense_mul_t(&a) - &a * s.transpose()).amax() < 1e-12);
        assert!((sp.dense_mul(&a6) - &a6 * &s).amax() < 1e-12);
        assert!((sp.t_mul_dense(&b6) - s.transpose() * &b6).amax() < 1e-12);
        let x = DVector::from_fn(4, |i, _| i as f64 - 1.5);
        assert!((sp.mul_vec(&x) - &s * &x).amax() < 1e-12);
        let y = DVector::from_fn(6, |i, _| 0.5 * i as f64);
        assert!((sp.t_mul_vec(&y) - s.transpose() * &y).amax() < 1e-12);
    }

    #[test]
    fn square_roots() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let r = sym_sqrt(&m);
        assert!((&r * &r - &m).amax() < 1e-12);
        let ri = sym_inv_sqrt(&m).unwrap();
        assert!((&ri * &m * &ri - DMatrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn vec_roundtrip_is_column_major() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(vec_of(&m).as_slice(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(unvec(&vec_of(&m), 2, 2), m);
    }
}
