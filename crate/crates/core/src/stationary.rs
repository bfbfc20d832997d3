//! Unconstrained parameterization of Schur-stable VAR(1) coefficients.
//!
//! Given an anchor `M` (SPD) and `V = L Lambda L'` (unit lower-triangular `L`,
//! positive diagonal `Lambda`), put `U = V + M` and
//! `Phi = V^{1/2} O U^{-1/2}` with orthogonal `O`. Then `U = Phi U Phi' + M`,
//! so `Phi` is stable for every parameter value. `O` is the squared Cayley
//! transform of a skew-symmetric `G`, optionally reflected in the first axis.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Lower bound on the log-diagonal of `Lambda`.
pub const MIN_LOG_DIAG: f64 = -30.0;

const STABILITY_MARGIN: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct StationaryVarParams {
    /// Strictly-lower entries of `L`, row by row.
    pub chol_lower: Vec<f64>,
    /// `log` of the diagonal of `Lambda`.
    pub log_diag: Vec<f64>,
    /// Strictly-lower entries of `G` (`G_ij = g`, `G_ji = -g`), row by row.
    pub skew_lower: Vec<f64>,
    pub reflect: bool,
}

impl StationaryVarParams {
    /// Parameters mapping to `Phi = 0` (up to `exp(MIN_LOG_DIAG)`).
    pub fn near_zero(n: usize) -> Self {
        let k = n * (n - 1) / 2;
        StationaryVarParams {
            chol_lower: vec![0.0; k],
            log_diag: vec![MIN_LOG_DIAG; n],
            skew_lower: vec![0.0; k],
            reflect: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.log_diag.len()
    }

    /// The `n^2` real parameters, concatenated `(L, lambda, g)`.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = self.chol_lower.clone();
        v.extend_from_slice(&self.log_diag);
        v.extend_from_slice(&self.skew_lower);
        v
    }

    pub fn from_vector(n: usize, v: &[f64], reflect: bool) -> Result<Self> {
        let k = n * (n - 1) / 2;
        if v.len() != n * n {
            return Err(Error::Dimension(format!("expected {} parameters, got {}", n * n, v.len())));
        }
        Ok(StationaryVarParams {
            chol_lower: v[..k].to_vec(),
            log_diag: v[k..k + n].to_vec(),
            skew_lower: v[k + n..].to_vec(),
            reflect,
        })
    }

    fn check(&self) -> Result<usize> {
        let n = self.log_diag.len();
        let k = n * (n - 1) / 2;
        if self.chol_lower.len() != k || self.skew_lower.len() != k {
            return Err(Error::Dimension(format!(
                "parameter lengths ({}, {}, {}) inconsistent",
                self.chol_lower.len(),
                n,
                self.skew_lower.len()
            )));
        }
        Ok(n)
    }

    pub fn lower_matrix(&self) -> DMatrix<f64> {
        let n = self.log_diag.len();
        let mut l = DMatrix::identity(n, n);
        fill_lower(&mut l, &self.chol_lower, false);
        l
    }

    pub fn skew_matrix(&self) -> DMatrix<f64> {
        let n = self.log_diag.len();
        let mut g = DMatrix::zeros(n, n);
        fill_lower(&mut g, &self.skew_lower, true);
        g
    }

    /// `V = L Lambda L'`
    pub fn v_matrix(&self) -> DMatrix<f64> {
        let l = self.lower_matrix();
        let lam = DVector::from_iterator(
            self.log_diag.len(),
            self.log_diag.iter().map(|&x| x.max(MIN_LOG_DIAG).exp()),
        );
        let mut v = &l * DMatrix::from_diagonal(&lam) * l.transpose();
        linalg::symmetrize(&mut v);
        v
    }
}

fn fill_lower(m: &mut DMatrix<f64>, vals: &[f64], skew: bool) {
    let n = m.nrows();
    let mut k = 0;
    for i in 0..n {
        for j in 0..i {
            m[(i, j)] = vals[k];
            if skew {
                m[(j, i)] = -vals[k];
            }
            k += 1;
        }
    }
}

/// `O = E_iota [(I - G)(I + G)^{-1}]^2` with `E_iota = I - 2 iota e1 e1'`.
pub fn cayley_orthogonal(skew_lower: &[f64], n: usize, reflect: bool) -> Result<DMatrix<f64>> {
    if skew_lower.len() != n * (n - 1) / 2 {
        return Err(Error::Dimension("skew parameter count".into()));
    }
    let mut g = DMatrix::zeros(n, n);
    fill_lower(&mut g, skew_lower, true);
    let id = DMatrix::<f64>::identity(n, n);
    // I - G and (I + G)^{-1} commute
    let c = (&id + &g)
        .lu()
        .solve(&(&id - &g))
        .ok_or_else(|| Error::NotPositiveDefinite("I + G is singular".into()))?;
    let mut o = &c * &c;
    if reflect && n > 0 {
        for j in 0..n {
            o[(0, j)] = -o[(0, j)];
        }
    }
    Ok(o)
}

/// `(Phi, U)` for the given parameters and anchor `M`.
pub fn to_phi(params: &StationaryVarParams, anchor: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = params.check()?;
    if anchor.shape() != (n, n) {
        return Err(Error::Dimension("anchor does not match parameter dimension".into()));
    }
    let v = params.v_matrix();
    let mut u = &v + anchor;
    linalg::symmetrize(&mut u);
    let u_inv_sqrt = linalg::sym_inv_sqrt(&u)?;
    let o = cayley_orthogonal(&params.skew_lower, n, params.reflect)?;
    let phi = linalg::sym_sqrt(&v) * o * u_inv_sqrt;
    Ok((phi, u))
}

/// Parameters whose image under [`to_phi`] with the same anchor is `phi`.
/// A singular `V = U - M` is floored at `exp(MIN_LOG_DIAG)`, so a singular
/// `phi` is reproduced only approximately.
pub fn from_phi(phi: &DMatrix<f64>, anchor: &DMatrix<f64>) -> Result<StationaryVarParams> {
    let n = phi.nrows();
    let u = solve_yule_walker(phi, anchor)?;
    let floor = MIN_LOG_DIAG.exp();
    let v = linalg::sym_apply(&(&u - anchor), |x| x.max(floor));
    let chol = linalg::cholesky_lower(&v, "V")?;
    let d = chol.diagonal();
    let l = &chol * DMatrix::from_diagonal(&d.map(|x| 1.0 / x));
    let o = nearest_orthogonal(&(linalg::sym_inv_sqrt(&v)? * phi * linalg::sym_sqrt(&u)));

    let reflect = o.determinant() < 0.0;
    let mut r = o;
    if reflect {
        for j in 0..n {
            r[(0, j)] = -r[(0, j)];
        }
    }
    let c = nearest_orthogonal(&principal_sqrt(&r)?);
    let id = DMatrix::<f64>::identity(n, n);
    let g = (&id + &c)
        .lu()
        .solve(&(&id - &c))
        .ok_or_else(|| Error::NotPositiveDefinite("rotation has eigenvalue -1".into()))?;

    let mut chol_lower = Vec::new();
    let mut skew_lower = Vec::new();
    for i in 0..n {
        for j in 0..i {
            chol_lower.push(l[(i, j)]);
            skew_lower.push(0.5 * (g[(i, j)] - g[(j, i)]));
        }
    }
    Ok(StationaryVarParams {
        chol_lower,
        log_diag: d.iter().map(|x| (x * x).ln().max(MIN_LOG_DIAG)).collect(),
        skew_lower,
        reflect,
    })
}

fn nearest_orthogonal(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    svd.u.expect("requested") * svd.v_t.expect("requested")
}

/// Denman-Beavers iteration for the principal square root.
fn principal_sqrt(r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = r.nrows();
    let mut y = r.clone();
    let mut z = DMatrix::identity(n, n);
    for _ in 0..100 {
        let yi = y.clone().try_inverse();
        let zi = z.clone().try_inverse();
        let (Some(yi), Some(zi)) = (yi, zi) else {
            break;
        };
        let y_next = (&y + zi) * 0.5;
        z = (&z + yi) * 0.5;
        let change = (&y_next - &y).amax();
        y = y_next;
        if change < 1e-14 {
            return Ok(y);
        }
    }
    if (&y * &y - r).amax() < 1e-8 {
        Ok(y)
    } else {
        Err(Error::NotPositiveDefinite("no principal square root of the rotation".into()))
    }
}

/// Solves `U = Phi U Phi' + M` through `vec(U) = (I - Phi (x) Phi)^{-1} vec(M)`.
pub fn solve_yule_walker(phi: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = phi.nrows();
    if phi.ncols() != n || m.shape() != (n, n) {
        return Err(Error::Dimension("Yule-Walker operands must be n x n".into()));
    }
    let rho = linalg::spectral_radius(phi);
    if rho >= 1.0 {
        return Err(Error::NonStationary(rho));
    }
    let a = DMatrix::identity(n * n, n * n) - linalg::kron(phi, phi);
    let vec_u = a
        .lu()
        .solve(&linalg::vec_of(m))
        .ok_or(Error::NonStationary(rho))?;
    let mut u = linalg::unvec(&vec_u, n, n);
    linalg::symmetrize(&mut u);
    if linalg::min_eigenvalue(&u) <= 0.0 {
        return Err(Error::NotPositiveDefinite("Yule-Walker solution".into()));
    }
    Ok(u)
}

/// Spectral radius strictly below one (with a `1e-12` margin).
pub fn is_schur_stable(phi: &DMatrix<f64>) -> bool {
    phi.nrows() == phi.ncols() && linalg::spectral_radius(phi) < 1.0 - STABILITY_MARGIN
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cayley_endpoints() {
        let o = cayley_orthogonal(&[0.0, 0.0, 0.0], 3, false).unwrap();
        assert_eq!(o, DMatrix::identity(3, 3));
        let o = cayley_orthogonal(&[0.0, 0.0, 0.0], 3, true).unwrap();
        assert_eq!(o, DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, 1.0, 1.0])));
    }

    #[test]
    fn cayley_rotation_angle() {
        // G = [[0, a], [-a, 0]] with a = 1 stored as g_21 = -1.
        let o = cayley_orthogonal(&[-1.0], 2, false).unwrap();
        assert!((o.transpose() * &o - DMatrix::identity(2, 2)).amax() < 1e-12);
        assert!((o.determinant() - 1.0).abs() < 1e-12);
        // (I-G)(I+G)^{-1} rotates by 2 atan(a) = pi/2; squared gives pi.
        assert!((o - DMatrix::identity(2, 2) * -1.0).amax() < 1e-12);
    }

    #[test]
    fn scalar_map() {
        let m = DMatrix::identity(1, 1);
        for (reflect, sign) in [(false, 1.0), (true, -1.0)] {
            let p = StationaryVarParams {
                chol_lower: vec![],
                log_diag: vec![0.0],
                skew_lower: vec![],
                reflect,
            };
            let (phi, u) = to_phi(&p, &m).unwrap();
            assert!((phi[(0, 0)] - sign * 0.5_f64.sqrt()).abs() < 1e-12);
            assert!((u[(0, 0)] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn vanishing_lambda_gives_zero_phi() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]);
        let (phi, u) = to_phi(&StationaryVarParams::near_zero(2), &m).unwrap();
        assert!(phi.amax() < 1e-6);
        assert!((u - m).amax() < 1e-10);
    }

    #[test]
    fn yule_walker_scalar_and_boundary() {
        let u = solve_yule_walker(&DMatrix::from_element(1, 1, 0.8), &DMatrix::from_element(1, 1, 0.36)).unwrap();
        assert!((u[(0, 0)] - 1.0).abs() < 1e-12);
        let m = DMatrix::identity(2, 2);
        assert_eq!(solve_yule_walker(&DMatrix::zeros(2, 2), &m).unwrap(), m);
        assert!(solve_yule_walker(&DMatrix::identity(2, 2), &m).is_err());
    }

    #[test]
    fn stability_check() {
        assert!(!is_schur_stable(&DMatrix::identity(3, 3)));
        assert!(is_schur_stable(&(DMatrix::identity(3, 3) * 0.5)));
        // companion of z^2 - 1.1 z + 0.1 has roots 1 and 0.1
        let c = DMatrix::from_row_slice(2, 2, &[1.1, -0.1, 1.0, 0.0]);
        assert!(!is_schur_stable(&c));
    }
}
