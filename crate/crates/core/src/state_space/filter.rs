use nalgebra::{DMatrix, DVector};

use super::{observed_rows, StateSpaceSystem, Structure};
use crate::error::{Error, Result};
use crate::linalg::{self, SparseRows};

const MAX_CONDITION: f64 = 1e12;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, Default)]
pub struct FilterOptions {
    /// Once the predicted covariance changes by less than this (max abs entry)
    /// between consecutive steps with the same observation pattern, the
    /// covariance quantities are reused until the pattern changes.
    pub steady_state_tol: Option<f64>,
}

/// Innovation quantities at a time point with at least one observed series.
#[derive(Debug, Clone)]
pub struct Innovation {
    /// `nu_t`, restricted to the observed rows.
    pub value: DVector<f64>,
    /// `F_t`
    pub cov: DMatrix<f64>,
    pub cov_inv: DMatrix<f64>,
    /// `K_t = T P_t z' F_t^{-1}`, `m x k`.
    pub gain: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct FilterStep {
    pub observed: Vec<usize>,
    /// `a_t = E[alpha_t | y_1..y_{t-1}]`
    pub predicted_mean: DVector<f64>,
    /// `P_t = Var[alpha_t | y_1..y_{t-1}]`
    pub predicted_cov: DMatrix<f64>,
    /// `None` when every series is missing at `t`.
    pub innovation: Option<Innovation>,
}

#[derive(Debug, Clone)]
pub struct FilterState {
    pub steps: Vec<FilterStep>,
    /// `a_{T+1}`
    pub next_mean: DVector<f64>,
    /// `P_{T+1}`
    pub next_cov: DMatrix<f64>,
    pub log_likelihood: f64,
}

impl FilterState {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `L_t = T - K_t z_t` (dense; `T` itself at fully missing times).
    pub fn companion(&self, sys: &StateSpaceSystem, t: usize) -> DMatrix<f64> {
        let step = &self.steps[t];
        match &step.innovation {
            None => sys.transition.clone(),
            Some(inn) => {
                let z = sys.obs_matrix.select_rows(step.observed.iter());
                &sys.transition - &inn.gain * z
            }
        }
    }
}

pub fn kalman_filter(sys: &StateSpaceSystem, data: &DMatrix<f64>) -> Result<FilterState> {
    kalman_filter_with(sys, data, FilterOptions::default())
}

pub fn log_likelihood(sys: &StateSpaceSystem, data: &DMatrix<f64>) -> Result<f64> {
    Ok(kalman_filter(sys, data)?.log_likelihood)
}

struct CovStep {
    f: DMatrix<f64>,
    f_inv: DMatrix<f64>,
    log_det_f: f64,
    gain: DMatrix<f64>,
    next_cov: DMatrix<f64>,
}

pub fn kalman_filter_with(
    sys: &StateSpaceSystem,
    data: &DMatrix<f64>,
    options: FilterOptions,
) -> Result<FilterState> {
    sys.check_data(data)?;
    let st = Structure::new(sys);
    let n = sys.n_obs();
    let n_time = data.ncols();

    let mut a = sys.init_mean.clone();
    let mut p = linalg::symmetrized(&sys.init_cov);
    let mut steps = Vec::with_capacity(n_time);
    let mut loglik = 0.0;

    let all_rows: Vec<usize> = (0..n).collect();
    let full_obs = st.obs.clone();
    let mut pattern_obs: (Vec<usize>, SparseRows) = (all_rows, full_obs);
    let mut steady: Option<(Vec<usize>, CovStep)> = None;
    let mut prev_pattern: Option<Vec<usize>> = None;

    for t in 0..n_time {
        let observed = observed_rows(data, t);
        let t_a = st.transition.mul_vec(&a) + &sys.state_intercept;

        if observed.is_empty() {
            steady = None;
            let tp = st.transition.mul_dense(&p);
            let mut next = st.transition.dense_mul_t(&tp) + &st.rqr;
            linalg::symmetrize(&mut next);
            steps.push(FilterStep {
                observed,
                predicted_mean: a,
                predicted_cov: p,
                innovation: None,
            });
            a = t_a;
            p = next;
            prev_pattern = None;
            continue;
        }

        if pattern_obs.0 != observed {
            pattern_obs = (observed.clone(), st.obs.select_rows(&observed));
        }
        let z = &pattern_obs.1;

        let reuse = matches!(&steady, Some((pat, _)) if *pat == observed);
        if !reuse {
            steady = None;
        }
        let cov_step = match steady.take() {
            Some((_, cs)) if reuse => cs,
            _ => covariance_step(&st, sys, z, &observed, &p, t)?,
        };

        let y_obs = DVector::from_iterator(observed.len(), observed.iter().map(|&i| data[(i, t)]));
        let v = y_obs - z.mul_vec(&a);
        let f_inv_v = &cov_step.f_inv * &v;
        loglik += -0.5 * (observed.len() as f64 * LN_2PI + cov_step.log_det_f + v.dot(&f_inv_v));
        let next_a = t_a + &cov_step.gain * &v;

        let converged = match (options.steady_state_tol, &prev_pattern) {
            (Some(tol), Some(prev)) if *prev == observed && !reuse => {
                (&cov_step.next_cov - &p).amax() < tol
            }
            (Some(_), _) => reuse,
            _ => false,
        };

        let next_p = cov_step.next_cov.clone();
        steps.push(FilterStep {
            observed: observed.clone(),
            predicted_mean: a,
            predicted_cov: p,
            innovation: Some(Innovation {
                value: v,
                cov: cov_step.f.clone(),
                cov_inv: cov_step.f_inv.clone(),
                gain: cov_step.gain.clone(),
            }),
        });
        if converged {
            // With P_{t+1} == P_t the next step reproduces the same quantities.
            let mut cs = cov_step;
            cs.next_cov = next_p.clone();
            steady = Some((observed.clone(), cs));
        }
        a = next_a;
        p = next_p;
        prev_pattern = Some(observed);
    }

    Ok(FilterState {
        steps,
        next_mean: a,
        next_cov: p,
        log_likelihood: loglik,
    })
}

fn covariance_step(
    st: &Structure,
    sys: &StateSpaceSystem,
    z: &SparseRows,
    observed: &[usize],
    p: &DMatrix<f64>,
    t: usize,
) -> Result<CovStep> {
    let pzt = z.dense_mul_t(p);
    let mut f = z.mul_dense(&pzt);
    for (a, &i) in observed.iter().enumerate() {
        for (b, &j) in observed.iter().enumerate() {
            f[(a, b)] += sys.obs_cov[(i, j)];
        }
    }
    linalg::symmetrize(&mut f);
    let chol = nalgebra::Cholesky::new(f.clone()).ok_or(Error::SingularInnovation {
        t,
        condition: f64::INFINITY,
    })?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), &d| (lo.min(d), hi.max(d)));
    let condition = (hi / lo).powi(2);
    if !condition.is_finite() || condition > MAX_CONDITION {
        return Err(Error::SingularInnovation { t, condition });
    }
    let log_det_f = 2.0 * diag.iter().map(|d| d.ln()).sum::<f64>();
    let mut f_inv = chol.inverse();
    linalg::symmetrize(&mut f_inv);

    let tpzt = st.transition.mul_dense(&pzt);
    let gain = &tpzt * &f_inv;
    let tp = st.transition.mul_dense(p);
    let mut next_cov = st.transition.dense_mul_t(&tp) - &gain * tpzt.transpose() + &st.rqr;
    linalg::symmetrize(&mut next_cov);
    Ok(CovStep {
        f,
        f_inv,
        log_det_f,
        gain,
        next_cov,
    })
}
