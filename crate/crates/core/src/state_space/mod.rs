//! Linear-Gaussian state-space engine.
//!
//! Observation: `y_t = z a_t + eps_t`, `eps_t ~ N(0, obs_cov)`.
//! Transition: `a_{t+1} = c + T a_t + R eta_t`, `eta_t ~ N(0, state_cov)`.
//! Initial state: `a_1 ~ N(init_mean, init_cov)`.
//!
//! Observations are passed as an `n x T` matrix; `NaN` marks a missing entry.
//! A time point may be fully or partially missing. Partially observed time
//! points use the observed rows of `z` and the matching block of `obs_cov`.

mod filter;
mod simulate;
mod smoother;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, SparseRows};

pub use filter::{kalman_filter, kalman_filter_with, log_likelihood, FilterOptions, FilterState, FilterStep, Innovation};
pub use simulate::{simulate, simulation_smoother, simulation_smoother_with};
pub use smoother::{backward_smoother, smoothed_means, SmoothedMoments};

const PSD_TOL: f64 = 1e-10;

/// The `(z, c, T, R, Sigma, Q)` matrices plus the initial state moments.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceSystem {
    pub obs_matrix: DMatrix<f64>,
    pub state_intercept: DVector<f64>,
    pub transition: DMatrix<f64>,
    pub noise_selector: DMatrix<f64>,
    pub obs_cov: DMatrix<f64>,
    pub state_cov: DMatrix<f64>,
    pub init_mean: DVector<f64>,
    pub init_cov: DMatrix<f64>,
}

impl StateSpaceSystem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        obs_matrix: DMatrix<f64>,
        state_intercept: DVector<f64>,
        transition: DMatrix<f64>,
        noise_selector: DMatrix<f64>,
        obs_cov: DMatrix<f64>,
        state_cov: DMatrix<f64>,
        init_mean: DVector<f64>,
        init_cov: DMatrix<f64>,
    ) -> Result<Self> {
        let sys = StateSpaceSystem {
            obs_matrix,
            state_intercept,
            transition,
            noise_selector,
            obs_cov,
            state_cov,
            init_mean,
            init_cov,
        };
        sys.validate()?;
        Ok(sys)
    }

    pub fn n_obs(&self) -> usize {
        self.obs_matrix.nrows()
    }

    pub fn n_state(&self) -> usize {
        self.transition.nrows()
    }

    pub fn n_noise(&self) -> usize {
        self.noise_selector.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.obs_matrix.nrows();
        let m = self.obs_matrix.ncols();
        let q = self.noise_selector.ncols();
        let dims_ok = self.transition.shape() == (m, m)
            && self.state_intercept.len() == m
            && self.noise_selector.nrows() == m
            && self.obs_cov.shape() == (n, n)
            && self.state_cov.shape() == (q, q)
            && self.init_mean.len() == m
            && self.init_cov.shape() == (m, m);
        if !dims_ok {
            return Err(Error::Dimension(format!(
                "inconsistent system: z {:?}, T {:?}, R {:?}, Sigma {:?}, Q {:?}, a1 {}, P1 {:?}",
                self.obs_matrix.shape(),
                self.transition.shape(),
                self.noise_selector.shape(),
                self.obs_cov.shape(),
                self.state_cov.shape(),
                self.init_mean.len(),
                self.init_cov.shape()
            )));
        }
        check_spd(&self.obs_cov, "observation covariance")?;
        // Degenerate (zero) state noise is allowed: it pins components.
        check_psd(&self.state_cov, "state covariance")?;
        check_psd(&self.init_cov, "initial covariance")
    }

    /// `R Q R'`
    pub fn state_noise_cov(&self) -> DMatrix<f64> {
        let mut out = &self.noise_selector * &self.state_cov * self.noise_selector.transpose();
        linalg::symmetrize(&mut out);
        out
    }

    pub(crate) fn check_data(&self, data: &DMatrix<f64>) -> Result<()> {
        if data.nrows() != self.n_obs() {
            return Err(Error::Dimension(format!(
                "data has {} rows, system expects {}",
                data.nrows(),
                self.n_obs()
            )));
        }
        Ok(())
    }
}

fn check_spd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !linalg::is_symmetric(m, 1e-10) {
        return Err(Error::NotPositiveDefinite(format!("{what} is not symmetric")));
    }
    let min = linalg::min_eigenvalue(m);
    if min <= 0.0 {
        return Err(Error::NotPositiveDefinite(format!("{what} has eigenvalue {min:.3e}")));
    }
    Ok(())
}

fn check_psd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !linalg::is_symmetric(m, 1e-10) {
        return Err(Error::NotPositiveDefinite(format!("{what} is not symmetric")));
    }
    let scale = m.amax().max(1.0);
    if linalg::min_eigenvalue(m) < -PSD_TOL * scale {
        return Err(Error::NotPositiveDefinite(format!("{what} is not positive semidefinite")));
    }
    Ok(())
}

/// Sparse views of the structural matrices shared by the recursions.
pub(crate) struct Structure {
    pub transition: SparseRows,
    pub obs: SparseRows,
    pub rqr: DMatrix<f64>,
}

impl Structure {
    pub fn new(sys: &StateSpaceSystem) -> Self {
        Structure {
            transition: SparseRows::from_dense(&sys.transition),
            obs: SparseRows::from_dense(&sys.obs_matrix),
            rqr: sys.state_noise_cov(),
        }
    }
}

/// Observed row indices of column `t`.
pub(crate) fn observed_rows(data: &DMatrix<f64>, t: usize) -> Vec<usize> {
    (0..data.nrows()).filter(|&i| !data[(i, t)].is_nan()).collect()
}
