//! Fixtures shared by the benchmarks: the simulated five-store panel with its
//! structural system, and posterior-like samples for the KS routines.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stcausal_core::causal::TrendSums;
use stcausal_core::structural::assemble_system;
use stcausal_core::{
    generate_panel, ComponentParams, SimConfig, SlopeMode, StateSpaceSystem, StructuralSpec, TimeSeriesPanel,
};

pub const SEASONAL_PERIOD: usize = 7;

/// Pre-period of the simulated panel for `seed`.
pub fn panel(seed: u64) -> TimeSeriesPanel {
    generate_panel(&SimConfig::default(), seed).expect("default simulation").panel.pre_period()
}

pub fn spec(panel: &TimeSeriesPanel, slope: SlopeMode) -> StructuralSpec {
    let counts = panel.control_ids.iter().map(|c| c.len()).collect();
    StructuralSpec::new(panel.n_series(), SEASONAL_PERIOD, slope, panel.graph.clone(), counts).expect("valid spec")
}

/// Structural system with moderate covariances and a stable slope.
pub fn system(spec: &StructuralSpec) -> StateSpaceSystem {
    let n = spec.n_series;
    let mut params = ComponentParams::default_for(n);
    params.sigma_u *= 0.01;
    params.sigma_v *= 0.01;
    params.sigma_w *= 0.01;
    if spec.slope_mode == SlopeMode::Stationary {
        params.phi = DMatrix::identity(n, n) * 0.5;
    }
    let m = spec.state_dim();
    let mut init = DMatrix::zeros(m, m);
    for k in 0..3 * n {
        init[(k, k)] = 1.0;
    }
    assemble_system(spec, &params, &DVector::zeros(m), &init).expect("valid system")
}

/// `k` fits of `draws` normal draws each, for one store and `horizon` days.
pub fn trend_sums(k: usize, draws: usize, horizon: usize, seed: u64) -> Vec<TrendSums> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|_| {
            let values = (0..horizon)
                .map(|_| (0..draws).map(|_| rng.random::<f64>()).collect())
                .collect();
            TrendSums::from_values(1, horizon, values)
        })
        .collect()
}
