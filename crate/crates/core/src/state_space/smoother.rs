use nalgebra::{DMatrix, DVector};

use super::{FilterState, StateSpaceSystem, Structure};
use crate::error::{Error, Result};
use crate::linalg::{self, SparseRows};

const MAX_RTS_CONDITION: f64 = 1e14;

/// Smoothed state moments given the full sample.
#[derive(Debug, Clone)]
pub struct SmoothedMoments {
    /// `E[alpha_t | Y]`
    pub means: Vec<DVector<f64>>,
    /// `Var[alpha_t | Y]`
    pub covs: Vec<DMatrix<f64>>,
    /// `lag_one[t - 1] = Cov[alpha_{t-1}, alpha_t | Y]` for `t >= 1`.
    pub lag_one: Vec<DMatrix<f64>>,
}

impl SmoothedMoments {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    /// `E[alpha_t alpha_t' | Y]`
    pub fn second_moment(&self, t: usize) -> DMatrix<f64> {
        &self.covs[t] + &self.means[t] * self.means[t].transpose()
    }

    /// `E[alpha_t alpha_{t-1}' | Y]` for `t >= 1`.
    pub fn cross_moment(&self, t: usize) -> DMatrix<f64> {
        self.lag_one[t - 1].transpose() + &self.means[t] * self.means[t - 1].transpose()
    }

    /// Smoothed means as an `m x T` matrix.
    pub fn mean_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_columns(&self.means)
    }
}

fn check_lengths(filt: &FilterState, sys: &StateSpaceSystem) -> Result<()> {
    if let Some(step) = filt.steps.first() {
        if step.predicted_mean.len() != sys.n_state() {
            return Err(Error::Dimension("filter state does not match system".into()));
        }
    }
    Ok(())
}

/// Backward recursion producing smoothed means, covariances and lag-one
/// cross covariances.
///
/// Covariances use the filtered-covariance form
/// `V_t = P_{t|t} + J_t (V_{t+1} - P_{t+1}) J_t'` with `J_t = P_{t|t} T' P_{t+1}^{-1}`,
/// which keeps its accuracy when the initial covariance is very large. Steps
/// where `P_{t+1}` is not positive definite fall back to `V_t = P_t - P_t N_{t-1} P_t`.
pub fn backward_smoother(sys: &StateSpaceSystem, filt: &FilterState) -> Result<SmoothedMoments> {
    check_lengths(filt, sys)?;
    let st = Structure::new(sys);
    let m = sys.n_state();
    let n_time = filt.len();
    let mut means = vec![DVector::zeros(m); n_time];
    let mut covs = vec![DMatrix::zeros(m, m); n_time];
    let mut lag_one = vec![DMatrix::zeros(m, m); n_time.saturating_sub(1)];

    let mut r = DVector::zeros(m);
    let mut nmat = DMatrix::zeros(m, m);
    let mut z_cache: Option<(Vec<usize>, SparseRows)> = None;
    // Cov[alpha_t, alpha_{t+1}] in the fallback form, from the later step.
    let mut ahead: Option<DMatrix<f64>> = None;

    for t in (0..n_time).rev() {
        let step = &filt.steps[t];
        let p = &step.predicted_cov;
        let filtered = match &step.innovation {
            None => p.clone(),
            Some(inn) => {
                let z = obs_rows(&st, &mut z_cache, &step.observed);
                let pz = z.dense_mul_t(p);
                let mut f = p - &pz * &inn.cov_inv * pz.transpose();
                linalg::symmetrize(&mut f);
                f
            }
        };

        // On entry r, nmat hold r_t, N_t; on exit r_{t-1}, N_{t-1}.
        match &step.innovation {
            None => {
                r = st.transition.t_mul_vec(&r);
                let nt = st.transition.dense_mul(&nmat);
                nmat = st.transition.t_mul_dense(&nt);
            }
            Some(inn) => {
                let z = obs_rows(&st, &mut z_cache, &step.observed);
                let coef = &inn.cov_inv * &inn.value - inn.gain.transpose() * &r;
                r = z.t_mul_vec(&coef) + st.transition.t_mul_vec(&r);

                let nt = st.transition.dense_mul(&nmat);
                let a = st.transition.t_mul_dense(&nt);
                let nk = &nmat * &inn.gain;
                let b = st.transition.t_mul_dense(&nk);
                let c = inn.gain.transpose() * &nk + &inn.cov_inv;
                let bz = z.dense_mul(&b);
                let zcz = z.t_mul_dense(&z.dense_mul(&c));
                nmat = a - &bz - bz.transpose() + zcz;
            }
        }
        linalg::symmetrize(&mut nmat);
        means[t] = &step.predicted_mean + p * &r;

        let rts = if t + 1 == n_time {
            Some((filtered, None))
        } else {
            let next_p = &filt.steps[t + 1].predicted_cov;
            let v_next = &covs[t + 1];
            rts_gain(next_p, &st.transition.mul_dense(&filtered)).map(|jt| {
                let j = jt.transpose();
                let v = &filtered + &j * (v_next - next_p) * &jt;
                let cross = &j * v_next;
                (v, Some(cross))
            })
        };
        match rts {
            Some((mut v, cross)) => {
                linalg::symmetrize(&mut v);
                covs[t] = v;
                if let Some(cross) = cross {
                    lag_one[t] = cross;
                }
            }
            None => {
                let mut v = p - p * &nmat * p;
                linalg::symmetrize(&mut v);
                covs[t] = v;
                lag_one[t] = ahead.take().expect("lag-one term from the later step");
            }
        }

        if t >= 1 {
            // Cov[alpha_{t-1}, alpha_t | Y] = P_{t-1} L_{t-1}' (I - N_{t-1} P_t)
            let prev = &filt.steps[t - 1];
            let pp = &prev.predicted_cov;
            let mut pl = st.transition.dense_mul_t(pp);
            if let Some(inn) = &prev.innovation {
                let zp = obs_rows(&st, &mut z_cache, &prev.observed);
                let pz = zp.dense_mul_t(pp);
                pl -= pz * inn.gain.transpose();
            }
            ahead = Some(&pl - pl.clone() * (&nmat * p));
        }
    }

    Ok(SmoothedMoments {
        means,
        covs,
        lag_one,
    })
}

/// `J_t' = P_{t+1}^+ T P_{t|t}`, solving only on the states whose predicted
/// variance is nonzero (the others are known exactly). `None` when that block
/// is numerically singular.
fn rts_gain(next_p: &DMatrix<f64>, tpf: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let m = next_p.nrows();
    let active: Vec<usize> = (0..m).filter(|&i| next_p[(i, i)] > 0.0).collect();
    let mut jt = DMatrix::zeros(m, m);
    if active.is_empty() {
        return Some(jt);
    }
    let block = next_p.select_rows(active.iter()).select_columns(active.iter());
    let chol = nalgebra::Cholesky::new(block)?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), &d| (lo.min(d), hi.max(d)));
    if lo.is_nan() || lo <= 0.0 || (hi / lo).powi(2) > MAX_RTS_CONDITION {
        return None;
    }
    let solved = chol.solve(&tpf.select_rows(active.iter()));
    for (a, &i) in active.iter().enumerate() {
        jt.set_row(i, &solved.row(a));
    }
    Some(jt)
}

/// Smoothed means only (no covariance recursion).
pub fn smoothed_means(sys: &StateSpaceSystem, filt: &FilterState) -> Result<DMatrix<f64>> {
    check_lengths(filt, sys)?;
    let st = Structure::new(sys);
    let m = sys.n_state();
    let n_time = filt.len();
    let mut out = DMatrix::zeros(m, n_time);
    let mut r = DVector::zeros(m);
    let mut z_cache: Option<(Vec<usize>, SparseRows)> = None;
    for t in (0..n_time).rev() {
        let step = &filt.steps[t];
        match &step.innovation {
            None => r = st.transition.t_mul_vec(&r),
            Some(inn) => {
                let z = obs_rows(&st, &mut z_cache, &step.observed);
                let coef = &inn.cov_inv * &inn.value - inn.gain.transpose() * &r;
                r = z.t_mul_vec(&coef) + st.transition.t_mul_vec(&r);
            }
        }
        let mean = &step.predicted_mean + &step.predicted_cov * &r;
        out.set_column(t, &mean);
    }
    Ok(out)
}

fn obs_rows<'a>(
    st: &Structure,
    cache: &'a mut Option<(Vec<usize>, SparseRows)>,
    observed: &[usize],
) -> &'a SparseRows {
    let stale = !matches!(cache, Some((rows, _)) if rows == observed);
    if stale {
        *cache = Some((observed.to_vec(), st.obs.select_rows(observed)));
    }
    &cache.as_ref().expect("cache populated").1
}
