//! Reference answers computed by assembling the joint Gaussian of all states
//! and observations and conditioning directly.

use nalgebra::{DMatrix, DVector};
use stcausal_core::StateSpaceSystem;

pub struct Joint {
    m: usize,
    n: usize,
    n_time: usize,
    /// Mean of (alpha_1..alpha_T) stacked.
    state_mean: DVector<f64>,
    state_cov: DMatrix<f64>,
}

impl Joint {
    pub fn new(sys: &StateSpaceSystem, n_time: usize) -> Self {
        let m = sys.n_state();
        let n = sys.n_obs();
        let rqr = &sys.noise_selector * &sys.state_cov * sys.noise_selector.transpose();
        let mut means = vec![sys.init_mean.clone()];
        let mut vars = vec![sys.init_cov.clone()];
        for t in 1..n_time {
            means.push(&sys.state_intercept + &sys.transition * &means[t - 1]);
            vars.push(&sys.transition * &vars[t - 1] * sys.transition.transpose() + &rqr);
        }
        let mut state_mean = DVector::zeros(m * n_time);
        let mut state_cov = DMatrix::zeros(m * n_time, m * n_time);
        for s in 0..n_time {
            state_mean.rows_mut(s * m, m).copy_from(&means[s]);
            let mut block = vars[s].clone();
            for t in s..n_time {
                // Cov(alpha_t, alpha_s) = T^{t-s} Var(alpha_s)
                state_cov.view_mut((t * m, s * m), (m, m)).copy_from(&block);
                state_cov.view_mut((s * m, t * m), (m, m)).copy_from(&block.transpose());
                block = &sys.transition * block;
            }
        }
        Joint { m, n, n_time, state_mean, state_cov }
    }

    /// Observation selector for the observed entries of `data` in columns `< upto`.
    fn selection(
        &self,
        sys: &StateSpaceSystem,
        data: &DMatrix<f64>,
        upto: usize,
    ) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        let mut rows = Vec::new();
        for t in 0..upto {
            for i in 0..self.n {
                if !data[(i, t)].is_nan() {
                    rows.push((t, i));
                }
            }
        }
        let k = rows.len();
        let mut h = DMatrix::zeros(k, self.m * self.n_time);
        let mut noise = DMatrix::zeros(k, k);
        let mut y = DVector::zeros(k);
        for (a, &(t, i)) in rows.iter().enumerate() {
            for j in 0..self.m {
                h[(a, t * self.m + j)] = sys.obs_matrix[(i, j)];
            }
            y[a] = data[(i, t)];
            for (b, &(s, l)) in rows.iter().enumerate() {
                if s == t {
                    noise[(a, b)] = sys.obs_cov[(i, l)];
                }
            }
        }
        (h, noise, y)
    }

    /// Mean and covariance of all states given observations in columns `< upto`.
    pub fn condition(
        &self,
        sys: &StateSpaceSystem,
        data: &DMatrix<f64>,
        upto: usize,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let (h, noise, y) = self.selection(sys, data, upto);
        if y.is_empty() {
            return (self.state_mean.clone(), self.state_cov.clone());
        }
        let syy = &h * &self.state_cov * h.transpose() + noise;
        let say = &self.state_cov * h.transpose();
        let inv = syy.try_inverse().unwrap();
        let gain = &say * inv;
        let mean = &self.state_mean + &gain * (y - &h * &self.state_mean);
        let cov = &self.state_cov - gain * say.transpose();
        (mean, cov)
    }

    pub fn log_likelihood(&self, sys: &StateSpaceSystem, data: &DMatrix<f64>) -> f64 {
        let (h, noise, y) = self.selection(sys, data, self.n_time);
        let syy = &h * &self.state_cov * h.transpose() + noise;
        let resid = y - &h * &self.state_mean;
        let k = resid.len() as f64;
        let chol = syy.cholesky().unwrap();
        let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let quad = resid.dot(&chol.solve(&resid));
        -0.5 * (k * (2.0 * std::f64::consts::PI).ln() + log_det + quad)
    }

    pub fn block_vec(&self, v: &DVector<f64>, t: usize) -> DVector<f64> {
        v.rows(t * self.m, self.m).into_owned()
    }

    pub fn block(&self, c: &DMatrix<f64>, s: usize, t: usize) -> DMatrix<f64> {
        c.view((s * self.m, t * self.m), (self.m, self.m)).into_owned()
    }
}
