//! Multivariate structural time-series model: local trend with a stochastic
//! slope, dummy seasonality and a regression on controls, cast as a
//! state-space system.
//!
//! State order: `(mu_t, tau_t, delta_t, ..., delta_{t-S+2})`, each block of
//! length `n`, so `m = n (S + 1)`.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::linalg;
use crate::state_space::StateSpaceSystem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlopeMode {
    /// `tau_{t+1} = D + Phi (tau_t - D) + v_t` with `Phi` Schur-stable.
    Stationary,
    /// `tau_{t+1} = tau_t + v_t`.
    RandomWalk,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructuralSpec {
    pub n_series: usize,
    pub seasonal_period: usize,
    pub slope_mode: SlopeMode,
    pub graph: Graph,
    pub control_counts: Vec<usize>,
}

impl StructuralSpec {
    pub fn new(
        n_series: usize,
        seasonal_period: usize,
        slope_mode: SlopeMode,
        graph: Graph,
        control_counts: Vec<usize>,
    ) -> Result<Self> {
        if seasonal_period < 2 {
            return Err(Error::InvalidArgument(format!(
                "seasonal period must be at least 2, got {seasonal_period}"
            )));
        }
        if graph.n_nodes() != n_series || control_counts.len() != n_series {
            return Err(Error::Dimension(format!(
                "{n_series} series but graph has {} nodes and {} control counts",
                graph.n_nodes(),
                control_counts.len()
            )));
        }
        Ok(StructuralSpec {
            n_series,
            seasonal_period,
            slope_mode,
            graph,
            control_counts,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.n_series * (self.seasonal_period + 1)
    }

    pub fn n_controls(&self) -> usize {
        self.control_counts.iter().sum()
    }

    pub fn trend(&self) -> Range<usize> {
        0..self.n_series
    }

    pub fn slope(&self) -> Range<usize> {
        self.n_series..2 * self.n_series
    }

    /// Current seasonal block `delta_t`.
    pub fn seasonal(&self) -> Range<usize> {
        2 * self.n_series..3 * self.n_series
    }
}

/// Covariances and slope parameters of the structural model.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentParams {
    pub sigma: DMatrix<f64>,
    pub sigma_u: DMatrix<f64>,
    pub sigma_v: DMatrix<f64>,
    pub sigma_w: DMatrix<f64>,
    pub d: DVector<f64>,
    pub phi: DMatrix<f64>,
}

impl ComponentParams {
    /// Identity covariances, zero slope mean, zero `Phi`.
    pub fn default_for(n: usize) -> Self {
        ComponentParams {
            sigma: DMatrix::identity(n, n),
            sigma_u: DMatrix::identity(n, n),
            sigma_v: DMatrix::identity(n, n),
            sigma_w: DMatrix::identity(n, n),
            d: DVector::zeros(n),
            phi: DMatrix::zeros(n, n),
        }
    }

    /// Checks covariances are SPD with graph-constrained inverses and, for a
    /// stationary slope, that `Phi` is Schur-stable.
    pub fn validate(&self, spec: &StructuralSpec) -> Result<()> {
        let n = spec.n_series;
        self.check_dims(n)?;
        for (name, cov) in self.covariances() {
            let k = linalg::spd_inverse(cov, name)?;
            let off = spec.graph.max_off_graph(&k);
            if off > 1e-8 {
                return Err(Error::Graph(format!(
                    "{name} precision has a non-edge entry of size {off:.3e}"
                )));
            }
        }
        if spec.slope_mode == SlopeMode::Stationary {
            let rho = linalg::spectral_radius(&self.phi);
            if rho >= 1.0 {
                return Err(Error::NonStationary(rho));
            }
        }
        Ok(())
    }

    fn check_dims(&self, n: usize) -> Result<()> {
        let ok = self.covariances().iter().all(|(_, c)| c.shape() == (n, n))
            && self.d.len() == n
            && self.phi.shape() == (n, n);
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension(format!("component parameters do not have {n} series")))
        }
    }

    fn covariances(&self) -> [(&'static str, &DMatrix<f64>); 4] {
        [
            ("observation covariance", &self.sigma),
            ("trend covariance", &self.sigma_u),
            ("slope covariance", &self.sigma_v),
            ("seasonal covariance", &self.sigma_w),
        ]
    }

    /// Reads the parameter blocks back out of an assembled system.
    pub fn from_system(spec: &StructuralSpec, sys: &StateSpaceSystem) -> Result<Self> {
        let n = spec.n_series;
        if sys.n_state() != spec.state_dim() || sys.n_obs() != n || sys.n_noise() != 3 * n {
            return Err(Error::Dimension("system does not match the structural spec".into()));
        }
        let q = &sys.state_cov;
        let phi = sys.transition.view((n, n), (n, n)).into_owned();
        let d = match spec.slope_mode {
            SlopeMode::RandomWalk => DVector::zeros(n),
            SlopeMode::Stationary => {
                let c = sys.state_intercept.rows(n, n).into_owned();
                let ip = DMatrix::identity(n, n) - &phi;
                ip.lu()
                    .solve(&c)
                    .ok_or(Error::NonStationary(1.0))?
            }
        };
        Ok(ComponentParams {
            sigma: sys.obs_cov.clone(),
            sigma_u: q.view((0, 0), (n, n)).into_owned(),
            sigma_v: q.view((n, n), (n, n)).into_owned(),
            sigma_w: q.view((2 * n, 2 * n), (n, n)).into_owned(),
            d,
            phi,
        })
    }
}

/// `z`, selecting `mu_t + delta_t` for each series.
pub fn observation_matrix(spec: &StructuralSpec) -> DMatrix<f64> {
    let n = spec.n_series;
    let mut z = DMatrix::zeros(n, spec.state_dim());
    for i in 0..n {
        z[(i, i)] = 1.0;
        z[(i, 2 * n + i)] = 1.0;
    }
    z
}

/// Transition matrix with `phi` in the slope block.
pub fn transition_matrix(spec: &StructuralSpec, phi: &DMatrix<f64>) -> DMatrix<f64> {
    let n = spec.n_series;
    let m = spec.state_dim();
    let s = spec.seasonal_period;
    let mut t = DMatrix::zeros(m, m);
    for i in 0..n {
        t[(i, i)] = 1.0;
        t[(i, n + i)] = 1.0;
    }
    match spec.slope_mode {
        SlopeMode::Stationary => t.view_mut((n, n), (n, n)).copy_from(phi),
        SlopeMode::RandomWalk => t.view_mut((n, n), (n, n)).fill_with_identity(),
    }
    // delta_{t+1} = -(delta_t + ... + delta_{t-S+2})
    for j in 0..(s - 1) {
        for i in 0..n {
            t[(2 * n + i, (2 + j) * n + i)] = -1.0;
        }
    }
    // shift the older seasonal blocks down by one
    for j in 1..(s - 1) {
        for i in 0..n {
            t[((2 + j) * n + i, (1 + j) * n + i)] = 1.0;
        }
    }
    t
}

/// `R`, mapping `(u, v, w)` onto the trend, slope and current seasonal block.
pub fn noise_selector(spec: &StructuralSpec) -> DMatrix<f64> {
    let n = spec.n_series;
    let mut r = DMatrix::zeros(spec.state_dim(), 3 * n);
    for k in 0..3 * n {
        r[(k, k)] = 1.0;
    }
    r
}

pub fn state_intercept(spec: &StructuralSpec, phi: &DMatrix<f64>, d: &DVector<f64>) -> DVector<f64> {
    let n = spec.n_series;
    let mut c = DVector::zeros(spec.state_dim());
    if spec.slope_mode == SlopeMode::Stationary {
        let v = (DMatrix::identity(n, n) - phi) * d;
        c.rows_mut(n, n).copy_from(&v);
    }
    c
}

pub fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let total: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(total, total);
    let mut off = 0;
    for b in blocks {
        out.view_mut((off, off), b.shape()).copy_from(b);
        off += b.nrows();
    }
    out
}

pub fn assemble_system(
    spec: &StructuralSpec,
    params: &ComponentParams,
    init_mean: &DVector<f64>,
    init_cov: &DMatrix<f64>,
) -> Result<StateSpaceSystem> {
    params.check_dims(spec.n_series)?;
    StateSpaceSystem::new(
        observation_matrix(spec),
        state_intercept(spec, &params.phi, &params.d),
        transition_matrix(spec, &params.phi),
        noise_selector(spec),
        params.sigma.clone(),
        block_diag(&[&params.sigma_u, &params.sigma_v, &params.sigma_w]),
        init_mean.clone(),
        init_cov.clone(),
    )
}

/// Scalar parameters of the single-series model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnivariateParams {
    pub d: f64,
    pub phi: f64,
    pub sigma2: f64,
    pub sigma_u2: f64,
    pub sigma_v2: f64,
    pub sigma_w2: f64,
}

impl UnivariateParams {
    pub fn to_components(&self) -> ComponentParams {
        let s = |v: f64| DMatrix::from_element(1, 1, v);
        ComponentParams {
            sigma: s(self.sigma2),
            sigma_u: s(self.sigma_u2),
            sigma_v: s(self.sigma_v2),
            sigma_w: s(self.sigma_w2),
            d: DVector::from_element(1, self.d),
            phi: s(self.phi),
        }
    }
}

pub fn univariate_spec(seasonal_period: usize, slope_mode: SlopeMode, n_controls: usize) -> Result<StructuralSpec> {
    StructuralSpec::new(1, seasonal_period, slope_mode, Graph::complete(1), vec![n_controls])
}

pub fn assemble_univariate(
    spec: &StructuralSpec,
    params: &UnivariateParams,
    init_mean: &DVector<f64>,
    init_cov: &DMatrix<f64>,
) -> Result<StateSpaceSystem> {
    if spec.n_series != 1 {
        return Err(Error::Dimension("univariate model needs a single series".into()));
    }
    if spec.slope_mode == SlopeMode::Stationary && params.phi.abs() >= 1.0 {
        return Err(Error::NonStationary(params.phi.abs()));
    }
    assemble_system(spec, &params.to_components(), init_mean, init_cov)
}

/// `Gamma(shape, rate)` on a precision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

/// Priors of the single-series model, scaled by the sample variance `SS`
/// of the series: `1/sigma^2 ~ Gamma(0.05, 0.05 SS)` and each state
/// precision `~ Gamma(0.01, 0.01 SS)`; `d ~ N(0, 0.1^2)`, `phi ~ N(0, 0.1^2)`
/// truncated to `(-1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnivariatePriors {
    pub sample_variance: f64,
    pub obs: GammaPrior,
    pub state: GammaPrior,
    pub d_sd: f64,
    pub phi_sd: f64,
}

impl UnivariatePriors {
    /// Missing values are skipped when computing `SS`.
    pub fn from_series(y: &[f64]) -> Result<Self> {
        let vals: Vec<f64> = y.iter().copied().filter(|v| !v.is_nan()).collect();
        if vals.len() < 2 {
            return Err(Error::InvalidArgument("need at least two observations for SS".into()));
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let ss = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
        let ss = if ss > 0.0 { ss } else { 1.0 };
        Ok(UnivariatePriors {
            sample_variance: ss,
            obs: GammaPrior {
                shape: 0.05,
                rate: 0.05 * ss,
            },
            state: GammaPrior {
                shape: 0.01,
                rate: 0.01 * ss,
            },
            d_sd: 0.1,
            phi_sd: 0.1,
        })
    }
}
