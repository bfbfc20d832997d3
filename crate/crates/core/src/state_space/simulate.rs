use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{kalman_filter_with, smoothed_means, FilterOptions, StateSpaceSystem};
use crate::error::Result;
use crate::linalg;

/// Unconditional draw of `(states m x T, observations n x T)`.
pub fn simulate<R: Rng + ?Sized>(
    sys: &StateSpaceSystem,
    n_time: usize,
    rng: &mut R,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = sys.n_state();
    let n = sys.n_obs();
    let init_factor = linalg::psd_factor(&sys.init_cov);
    let state_factor = &sys.noise_selector * linalg::psd_factor(&sys.state_cov);
    let obs_factor = linalg::psd_factor(&sys.obs_cov);
    let zero_n = DVector::zeros(n);

    let mut states = DMatrix::zeros(m, n_time);
    let mut obs = DMatrix::zeros(n, n_time);
    let mut alpha = linalg::gaussian_draw(rng, &sys.init_mean, &init_factor);
    for t in 0..n_time {
        let eps = linalg::gaussian_draw(rng, &zero_n, &obs_factor);
        obs.set_column(t, &(&sys.obs_matrix * &alpha + eps));
        states.set_column(t, &alpha);
        if t + 1 < n_time {
            let eta = &state_factor * linalg::standard_normal_vector(rng, sys.n_noise());
            alpha = &sys.state_intercept + &sys.transition * &alpha + eta;
        }
    }
    (states, obs)
}

/// Draw of the state path from `p(alpha_1..alpha_T | Y)`, returned as `m x T`.
pub fn simulation_smoother<R: Rng + ?Sized>(
    sys: &StateSpaceSystem,
    data: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    simulation_smoother_with(sys, data, rng, FilterOptions::default())
}

/// Mean-correction simulation smoother: simulate from the model, then shift the
/// draw by the smoothed mean of the data minus the simulated observations.
pub fn simulation_smoother_with<R: Rng + ?Sized>(
    sys: &StateSpaceSystem,
    data: &DMatrix<f64>,
    rng: &mut R,
    options: FilterOptions,
) -> Result<DMatrix<f64>> {
    sys.check_data(data)?;
    let (states, sim_obs) = simulate(sys, data.ncols(), rng);
    let diff = data.zip_map(&sim_obs, |y, s| if y.is_nan() { f64::NAN } else { y - s });

    let mut centered = sys.clone();
    centered.state_intercept.fill(0.0);
    centered.init_mean.fill(0.0);
    let filt = kalman_filter_with(&centered, &diff, options)?;
    let correction = smoothed_means(&centered, &filt)?;
    Ok(states + correction)
}
