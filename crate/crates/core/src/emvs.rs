//! Spike-and-slab variable selection by EM (optionally deterministically
//! annealed), with the state-space expectations from the Kalman smoother.
//!
//! Each coefficient has prior `(1 - gamma) N(0, v0) + gamma N(0, v1)` with
//! `gamma ~ Bernoulli(theta)` and `theta ~ Beta(zeta1, zeta2)`. The remaining
//! parameters are the structural-model covariances (G-Wishart priors,
//! maximized under the graph constraint) and, for a stationary slope, a VAR
//! coefficient with a Gaussian ridge prior.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ips_precision, Graph};
use crate::linalg;
use crate::panel::TimeSeriesPanel;
use crate::state_space::{backward_smoother, kalman_filter, StateSpaceSystem};
use crate::structural::{self, ComponentParams, SlopeMode, StructuralSpec};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const IPS_TOL: f64 = 1e-10;
const IPS_MAX_SWEEPS: usize = 100;
/// Allowed decrease of the objective, relative to its magnitude.
pub const MONOTONE_SLACK: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpikeSlabConfig {
    pub v0_grid: Vec<f64>,
    pub v1: f64,
    pub zeta1: f64,
    pub zeta2: f64,
    /// Annealing exponent `s` in `(0, 1]`; `1` is plain EM.
    pub temperature: f64,
    pub max_iters: usize,
    pub convergence_tol: f64,
}

impl Default for SpikeSlabConfig {
    fn default() -> Self {
        SpikeSlabConfig {
            v0_grid: linspace(1e-6, 0.02, 20),
            v1: 10.0,
            zeta1: 1.0,
            zeta2: 1.0,
            temperature: 0.1,
            max_iters: 50,
            convergence_tol: 1e-6,
        }
    }
}

impl SpikeSlabConfig {
    pub fn validate(&self) -> Result<()> {
        if self.v0_grid.is_empty() {
            return Err(Error::Validation("v0 grid is empty".into()));
        }
        if let Some(v0) = self.v0_grid.iter().find(|&&v0| !(v0 > 0.0 && v0 < self.v1)) {
            return Err(Error::Validation(format!("v0 = {v0} must lie in (0, v1 = {})", self.v1)));
        }
        if !(self.temperature > 0.0 && self.temperature <= 1.0) {
            return Err(Error::Validation(format!(
                "temperature {} must lie in (0, 1]",
                self.temperature
            )));
        }
        if self.zeta1 <= 0.0 || self.zeta2 <= 0.0 {
            return Err(Error::Validation("Beta prior shapes must be positive".into()));
        }
        Ok(())
    }
}

pub fn linspace(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    match k {
        0 => vec![],
        1 => vec![lo],
        _ => (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect(),
    }
}

/// Which model supplies the E-step expectations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmvsModel {
    /// Structural model with a VAR(1) slope under a ridge prior.
    Stationary,
    /// Structural model with a random-walk slope and diffuse slope start.
    Nonstationary,
    /// Regression with i.i.d. errors (no states).
    Misspecified,
}

/// Prior constants shared by the covariance updates.
#[derive(Debug, Clone, PartialEq)]
pub struct EmvsHyper {
    pub nu: f64,
    pub h: DMatrix<f64>,
    /// `k1, k2, k3` for the trend, slope and seasonal covariances.
    pub k: [f64; 3],
    /// Ridge precision of the stationary-slope coefficient prior.
    pub phi_ridge: f64,
    /// Initial-state variance of the trend, slope and seasonal blocks.
    pub init_var: f64,
    /// Initial slope variance for the nonstationary model.
    pub diffuse_var: f64,
}

impl EmvsHyper {
    pub fn default_for(n: usize) -> Self {
        EmvsHyper {
            nu: 1.0,
            h: DMatrix::identity(n, n),
            k: [0.1; 3],
            phi_ridge: 10.0,
            init_var: 1.0,
            diffuse_var: 1e6,
        }
    }

    fn state_scale(&self, n: usize, block: usize) -> DMatrix<f64> {
        &self.h * (self.k[block].powi(2) * (n as f64 + 1.0))
    }
}

/// Everything `run_emvs` needs besides the data and `v0`.
#[derive(Debug, Clone)]
pub struct EmvsProblem {
    pub model: EmvsModel,
    pub seasonal_period: usize,
    pub config: SpikeSlabConfig,
    pub hyper: EmvsHyper,
}

impl EmvsProblem {
    pub fn new(model: EmvsModel, seasonal_period: usize, n_series: usize) -> Self {
        EmvsProblem {
            model,
            seasonal_period,
            config: SpikeSlabConfig::default(),
            hyper: EmvsHyper::default_for(n_series),
        }
    }

    fn spec(&self, panel: &TimeSeriesPanel) -> Result<StructuralSpec> {
        let mode = match self.model {
            EmvsModel::Nonstationary => SlopeMode::RandomWalk,
            _ => SlopeMode::Stationary,
        };
        StructuralSpec::new(
            panel.n_series(),
            self.seasonal_period,
            mode,
            panel.graph.clone(),
            panel.control_counts(),
        )
    }

    /// `P_1`: diagonal on the trend, slope and current seasonal blocks.
    fn init_cov(&self, spec: &StructuralSpec) -> DMatrix<f64> {
        let n = spec.n_series;
        let mut p = DMatrix::zeros(spec.state_dim(), spec.state_dim());
        for k in 0..3 * n {
            p[(k, k)] = self.hyper.init_var;
        }
        if self.model == EmvsModel::Nonstationary {
            for k in spec.slope() {
                p[(k, k)] = self.hyper.diffuse_var;
            }
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmvsState {
    pub beta: DVector<f64>,
    pub theta: f64,
    pub phi: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub sigma_u: DMatrix<f64>,
    pub sigma_v: DMatrix<f64>,
    pub sigma_w: DMatrix<f64>,
    pub w: Vec<f64>,
    pub a_star: Vec<f64>,
    pub q_value: f64,
    pub q_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl EmvsState {
    pub fn initial(n: usize, p: usize, model: EmvsModel) -> Self {
        let phi = match model {
            EmvsModel::Nonstationary => DMatrix::identity(n, n),
            _ => DMatrix::zeros(n, n),
        };
        EmvsState {
            beta: DVector::zeros(p),
            theta: 0.5,
            phi,
            sigma: DMatrix::identity(n, n),
            sigma_u: DMatrix::identity(n, n) * 0.01,
            sigma_v: DMatrix::identity(n, n) * 0.01,
            sigma_w: DMatrix::identity(n, n) * 0.01,
            w: vec![0.5; p],
            a_star: vec![0.0; p],
            q_value: f64::NEG_INFINITY,
            q_trace: Vec::new(),
            iterations: 0,
            converged: false,
        }
    }

    fn components(&self) -> ComponentParams {
        ComponentParams {
            sigma: self.sigma.clone(),
            sigma_u: self.sigma_u.clone(),
            sigma_v: self.sigma_v.clone(),
            sigma_w: self.sigma_w.clone(),
            d: DVector::zeros(self.sigma.nrows()),
            phi: self.phi.clone(),
        }
    }
}

/// Inclusion weights `w` and precision weights `a*`.
///
/// `w_i = g1^s / (g1^s + g2^s)` with `g1 = theta N(beta_i; 0, v1)` and
/// `g2 = (1 - theta) N(beta_i; 0, v0)`, evaluated in log space.
pub fn e_step_gamma(beta: &[f64], theta: f64, v0: f64, v1: f64, s: f64) -> (Vec<f64>, Vec<f64>) {
    let mut w = Vec::with_capacity(beta.len());
    let mut a = Vec::with_capacity(beta.len());
    for &b in beta {
        let (l1, l2) = log_spike_slab(b, theta, v0, v1);
        let wi = if l1 == f64::NEG_INFINITY {
            0.0
        } else if l2 == f64::NEG_INFINITY {
            1.0
        } else {
            1.0 / (1.0 + (s * (l2 - l1)).exp())
        };
        w.push(wi);
        a.push((1.0 - wi) / v0 + wi / v1);
    }
    (w, a)
}

fn log_normal0(x: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln() + x * x / var)
}

fn log_spike_slab(b: f64, theta: f64, v0: f64, v1: f64) -> (f64, f64) {
    (
        log_normal0(b, v1) + theta.ln(),
        log_normal0(b, v0) + (1.0 - theta).ln(),
    )
}

/// `(1/s) sum_i log(g1^s + g2^s)`: the coefficient prior after summing out
/// the tempered indicators.
pub fn tempered_log_prior(beta: &[f64], theta: f64, v0: f64, v1: f64, s: f64) -> f64 {
    beta.iter()
        .map(|&b| {
            let (l1, l2) = log_spike_slab(b, theta, v0, v1);
            let hi = (s * l1).max(s * l2);
            (hi + ((s * l1 - hi).exp() + (s * l2 - hi).exp()).ln()) / s
        })
        .sum()
}

/// `theta = (sum w + zeta1 - 1) / (p + zeta1 + zeta2 - 2)`
pub fn m_step_theta(w: &[f64], zeta1: f64, zeta2: f64) -> Result<f64> {
    let denom = w.len() as f64 + zeta1 + zeta2 - 2.0;
    if denom <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "theta update denominator {denom} is not positive"
        )));
    }
    let theta = (w.iter().sum::<f64>() + zeta1 - 1.0) / denom;
    Ok(theta.clamp(0.0, 1.0))
}

/// How the `p x p` system of the coefficient update is inverted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BetaSolver {
    Direct,
    Woodbury,
    /// Woodbury when `p` exceeds the number of stacked observation rows.
    Auto,
}

/// Ridge-type coefficient update
/// `beta = (sum_t X_t' K X_t + diag(a*))^{-1} sum_t X_t' K r_t`
/// with `K = obs_cov^{-1}` and `r_t` the expected data net of the states.
pub fn m_step_beta(
    designs: &[DMatrix<f64>],
    responses: &DMatrix<f64>,
    obs_cov: &DMatrix<f64>,
    a_star: &[f64],
    solver: BetaSolver,
) -> Result<DVector<f64>> {
    let p = a_star.len();
    if p == 0 {
        return Ok(DVector::zeros(0));
    }
    if a_star.iter().any(|&a| !(a > 0.0)) {
        return Err(Error::InvalidArgument("precision weights must be positive".into()));
    }
    let n = obs_cov.nrows();
    if designs.len() != responses.ncols() || responses.nrows() != n {
        return Err(Error::Dimension("designs and responses disagree".into()));
    }
    let chol = linalg::cholesky_lower(obs_cov, "observation covariance")?;
    let k = linalg::spd_inverse(obs_cov, "observation covariance")?;
    let mut rhs = DVector::zeros(p);
    for (t, x) in designs.iter().enumerate() {
        if x.shape() != (n, p) {
            return Err(Error::Dimension(format!("design at {t} has shape {:?}", x.shape())));
        }
        rhs += x.transpose() * (&k * responses.column(t));
    }
    let rows = n * designs.len();
    let use_woodbury = match solver {
        BetaSolver::Direct => false,
        BetaSolver::Woodbury => true,
        BetaSolver::Auto => p > rows,
    };
    if !use_woodbury {
        let mut g = DMatrix::from_diagonal(&DVector::from_column_slice(a_star));
        for x in designs {
            g += x.transpose() * &k * x;
        }
        let chol_g = nalgebra::Cholesky::new(linalg::symmetrized(&g))
            .ok_or_else(|| Error::NotPositiveDefinite("coefficient system".into()))?;
        return Ok(chol_g.solve(&rhs));
    }
    // (A + W'W)^{-1} = A^{-1} - A^{-1} W' (I + W A^{-1} W')^{-1} W A^{-1},
    // W stacking L^{-1} X_t with K = L^{-T} L^{-1}.
    let mut wmat = DMatrix::zeros(rows, p);
    for (t, x) in designs.iter().enumerate() {
        let lx = chol
            .solve_lower_triangular(x)
            .ok_or_else(|| Error::NotPositiveDefinite("observation covariance".into()))?;
        wmat.view_mut((t * n, 0), (n, p)).copy_from(&lx);
    }
    let a_inv = DVector::from_iterator(p, a_star.iter().map(|a| 1.0 / a));
    let a_inv_rhs = rhs.component_mul(&a_inv);
    let wa = DMatrix::from_fn(rows, p, |i, j| wmat[(i, j)] * a_inv[j]);
    let mut inner = &wa * wmat.transpose();
    for i in 0..rows {
        inner[(i, i)] += 1.0;
    }
    let chol_inner = nalgebra::Cholesky::new(linalg::symmetrized(&inner))
        .ok_or_else(|| Error::NotPositiveDefinite("Woodbury inner system".into()))?;
    let corr = wa.transpose() * chol_inner.solve(&(&wa * &rhs));
    Ok(a_inv_rhs - corr)
}

/// Ridge VAR coefficient maximizing
/// `-1/2 sum E[(tau_{t+1} - Phi tau_t)' Sv^{-1} (...)] - ridge/2 |Phi|^2`
/// from `s00 = sum E[tau_t tau_t']` and `s10 = sum E[tau_{t+1} tau_t']`.
pub fn m_step_phi(
    s00: &DMatrix<f64>,
    s10: &DMatrix<f64>,
    sigma_v: &DMatrix<f64>,
    ridge: f64,
) -> Result<DMatrix<f64>> {
    let n = sigma_v.nrows();
    let sv_inv = linalg::spd_inverse(sigma_v, "slope covariance")?;
    let mut a = linalg::kron(s00, &sv_inv);
    for i in 0..n * n {
        a[(i, i)] += ridge;
    }
    let b = linalg::vec_of(&(&sv_inv * s10));
    let sol = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::NotPositiveDefinite("VAR normal equations".into()))?;
    Ok(linalg::unvec(&sol, n, n))
}

/// Graph-constrained covariance maximizing
/// `(count + df - 2)/2 log|K| - tr(K (scatter + prior_rate))/2`.
pub fn m_step_covariance(
    scatter: &DMatrix<f64>,
    count: f64,
    df: f64,
    prior_rate: &DMatrix<f64>,
    graph: &Graph,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let denom = count + df - 2.0;
    if denom <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "covariance update denominator {denom} is not positive"
        )));
    }
    let mut target = (scatter + prior_rate) / denom;
    linalg::symmetrize(&mut target);
    let k = ips_precision(graph, &target, IPS_TOL, IPS_MAX_SWEEPS)?;
    let cov = linalg::spd_inverse(&k, "fitted precision")?;
    Ok((cov, k))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdFlag {
    Ok,
    /// The radicand was negative; every coefficient is selected.
    NegativeRadicand,
    /// `v0` too close to `v1` (or `theta` at a boundary).
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub value: f64,
    pub flag: ThresholdFlag,
}

/// `sqrt[(log(v0/v1) + 2 log(theta/(1-theta))) / (1/v1 - 1/v0)]`: the
/// coefficient size at which the inclusion probability crosses 1/2.
pub fn selection_threshold(v0: f64, v1: f64, theta: f64) -> Threshold {
    let denom = 1.0 / v1 - 1.0 / v0;
    let num = (v0 / v1).ln() + 2.0 * (theta / (1.0 - theta)).ln();
    if !denom.is_finite() || denom.abs() < 1e-12 || !num.is_finite() {
        let value = if theta >= 1.0 { 0.0 } else { f64::INFINITY };
        return Threshold {
            value,
            flag: ThresholdFlag::Degenerate,
        };
    }
    let r = num / denom;
    if r < 0.0 {
        Threshold {
            value: 0.0,
            flag: ThresholdFlag::NegativeRadicand,
        }
    } else {
        Threshold {
            value: r.sqrt(),
            flag: ThresholdFlag::Ok,
        }
    }
}

/// Sums of smoothed state second moments over transitions:
/// `s11 = sum_{t>=1} E[a_t a_t']`, `s10 = sum E[a_t a_{t-1}']`,
/// `s00 = sum_{t<T-1} E[a_t a_t']`.
struct StateSums {
    s11: DMatrix<f64>,
    s10: DMatrix<f64>,
    s00: DMatrix<f64>,
}

/// E-step output.
struct Expectations {
    loglik: f64,
    /// `E[y_t - X_t beta - z a_t]`, every row filled.
    resid: DMatrix<f64>,
    /// `sum_t Cov[y_t - X_t beta - z a_t]`.
    resid_cov: DMatrix<f64>,
    sums: Option<StateSums>,
}

struct Workspace<'a> {
    panel: &'a TimeSeriesPanel,
    problem: &'a EmvsProblem,
    spec: Option<StructuralSpec>,
    init_cov: Option<DMatrix<f64>>,
    designs: Vec<DMatrix<f64>>,
}

impl<'a> Workspace<'a> {
    fn new(panel: &'a TimeSeriesPanel, problem: &'a EmvsProblem) -> Result<Self> {
        let (spec, init_cov) = if problem.model == EmvsModel::Misspecified {
            (None, None)
        } else {
            let spec = problem.spec(panel)?;
            let p1 = problem.init_cov(&spec);
            (Some(spec), Some(p1))
        };
        Ok(Workspace {
            panel,
            problem,
            spec,
            init_cov,
            designs: (0..panel.n_time()).map(|t| panel.design_at(t)).collect(),
        })
    }

    fn system(&self, state: &EmvsState) -> Result<Option<StateSpaceSystem>> {
        match (&self.spec, &self.init_cov) {
            (Some(spec), Some(p1)) => {
                let sys = structural::assemble_system(
                    spec,
                    &state.components(),
                    &DVector::zeros(spec.state_dim()),
                    p1,
                )?;
                Ok(Some(sys))
            }
            _ => Ok(None),
        }
    }

    fn expectations(&self, state: &EmvsState) -> Result<Expectations> {
        let resid_data = crate::panel::apply_regression(self.panel, &state.beta)?;
        let n = self.panel.n_series();
        let nt = self.panel.n_time();
        let sigma = &state.sigma;
        let mut resid = DMatrix::zeros(n, nt);
        let mut resid_cov = DMatrix::zeros(n, n);

        let (loglik, smoothed, sys) = match self.system(state)? {
            Some(sys) => {
                let filt = kalman_filter(&sys, &resid_data)?;
                let sm = backward_smoother(&sys, &filt)?;
                (filt.log_likelihood, Some(sm), Some(sys))
            }
            None => (0.0, None, None),
        };
        let mut ll = loglik;

        for t in 0..nt {
            let obs: Vec<usize> = (0..n).filter(|&i| !resid_data[(i, t)].is_nan()).collect();
            if obs.is_empty() {
                resid_cov += sigma;
                continue;
            }
            let mis: Vec<usize> = (0..n).filter(|i| !obs.contains(i)).collect();
            let y_o = DVector::from_iterator(obs.len(), obs.iter().map(|&i| resid_data[(i, t)]));
            let (e_o, c_o) = match (&sys, &smoothed) {
                (Some(sys), Some(sm)) => {
                    let z_o = sys.obs_matrix.select_rows(obs.iter());
                    let e = y_o - &z_o * &sm.means[t];
                    let c = &z_o * &sm.covs[t] * z_o.transpose();
                    (e, c)
                }
                _ => {
                    let s_oo = sigma.select_rows(obs.iter()).select_columns(obs.iter());
                    let l = linalg::cholesky_lower(&s_oo, "observation covariance")?;
                    ll += linalg::gaussian_log_density_chol(&y_o, &l);
                    (y_o, DMatrix::zeros(obs.len(), obs.len()))
                }
            };
            if mis.is_empty() {
                resid.set_column(t, &e_o);
                resid_cov += c_o;
                continue;
            }
            // Missing rows: E[eps_m | eps_o] = B eps_o with B = S_mo S_oo^{-1}.
            let s_oo = sigma.select_rows(obs.iter()).select_columns(obs.iter());
            let s_mo = sigma.select_rows(mis.iter()).select_columns(obs.iter());
            let s_mm = sigma.select_rows(mis.iter()).select_columns(mis.iter());
            let b = &s_mo * linalg::spd_inverse(&s_oo, "observed covariance block")?;
            let e_m = &b * &e_o;
            let c_mo = &b * &c_o;
            let c_mm = &b * &c_o * b.transpose() + &s_mm - &b * s_mo.transpose();
            for (a, &i) in obs.iter().enumerate() {
                resid[(i, t)] = e_o[a];
                for (c, &j) in obs.iter().enumerate() {
                    resid_cov[(i, j)] += c_o[(a, c)];
                }
                for (c, &j) in mis.iter().enumerate() {
                    resid_cov[(j, i)] += c_mo[(c, a)];
                    resid_cov[(i, j)] += c_mo[(c, a)];
                }
            }
            for (a, &i) in mis.iter().enumerate() {
                resid[(i, t)] = e_m[a];
                for (c, &j) in mis.iter().enumerate() {
                    resid_cov[(i, j)] += c_mm[(a, c)];
                }
            }
        }

        let sums = smoothed.map(|sm| {
            let m = sm.means[0].len();
            let mut s11 = DMatrix::zeros(m, m);
            let mut s10 = DMatrix::zeros(m, m);
            let mut s00 = DMatrix::zeros(m, m);
            for t in 1..nt {
                s11 += sm.second_moment(t);
                s10 += sm.cross_moment(t);
                s00 += sm.second_moment(t - 1);
            }
            StateSums { s11, s10, s00 }
        });
        Ok(Expectations {
            loglik: ll,
            resid,
            resid_cov,
            sums,
        })
    }

    /// Tempered log posterior at `state`, given its log-likelihood.
    fn objective(&self, state: &EmvsState, loglik: f64, v0: f64) -> Result<f64> {
        let cfg = &self.problem.config;
        let hyper = &self.problem.hyper;
        let n = self.panel.n_series();
        let beta: Vec<f64> = state.beta.iter().copied().collect();
        let mut q = loglik + tempered_log_prior(&beta, state.theta, v0, cfg.v1, cfg.temperature);
        q += beta_log_prior(state.theta, cfg.zeta1, cfg.zeta2);
        q += gwishart_log_prior(&state.sigma, hyper.nu, &hyper.h)?;
        if self.spec.is_some() {
            q += gwishart_log_prior(&state.sigma_u, hyper.nu, &hyper.state_scale(n, 0))?;
            q += gwishart_log_prior(&state.sigma_v, hyper.nu, &hyper.state_scale(n, 1))?;
            q += gwishart_log_prior(&state.sigma_w, hyper.nu, &hyper.state_scale(n, 2))?;
        }
        if self.problem.model == EmvsModel::Stationary {
            q -= 0.5 * hyper.phi_ridge * state.phi.norm_squared();
        }
        Ok(q)
    }

    fn m_step(&self, state: &EmvsState, ex: &Expectations, v0: f64) -> Result<EmvsState> {
        let cfg = &self.problem.config;
        let hyper = &self.problem.hyper;
        let n = self.panel.n_series();
        let nt = self.panel.n_time();
        let graph = &self.panel.graph;
        let beta_k: Vec<f64> = state.beta.iter().copied().collect();

        let (w, a_star) = e_step_gamma(&beta_k, state.theta, v0, cfg.v1, cfg.temperature);
        let mut next = state.clone();
        if !beta_k.is_empty() {
            next.theta = m_step_theta(&w, cfg.zeta1, cfg.zeta2)?;
        }

        // r_t = E[y_t - z a_t] = resid_t + X_t beta_k
        let mut responses = ex.resid.clone();
        for t in 0..nt {
            let xb = &self.designs[t] * &state.beta;
            let mut col = responses.column_mut(t);
            col += xb;
        }
        next.beta = m_step_beta(&self.designs, &responses, &state.sigma, &a_star, BetaSolver::Auto)?;
        next.w = w;
        next.a_star = a_star;

        if let (Some(spec), Some(sums)) = (&self.spec, &ex.sums) {
            if self.problem.model == EmvsModel::Stationary {
                let sl = spec.slope();
                let s00 = sums.s00.view((sl.start, sl.start), (n, n)).into_owned();
                let s10 = sums.s10.view((sl.start, sl.start), (n, n)).into_owned();
                next.phi = m_step_phi(&s00, &s10, &state.sigma_v, hyper.phi_ridge)?;
            }
        }

        // Observation covariance with the updated coefficients.
        let mut scatter = ex.resid_cov.clone();
        let delta_beta = &state.beta - &next.beta;
        for t in 0..nt {
            let e = ex.resid.column(t) + &self.designs[t] * &delta_beta;
            scatter += &e * e.transpose();
        }
        linalg::symmetrize(&mut scatter);
        next.sigma = m_step_covariance(&scatter, nt as f64, hyper.nu, &hyper.h, graph)?.0;

        if let (Some(spec), Some(sums)) = (&self.spec, &ex.sums) {
            let t_mat = structural::transition_matrix(spec, &next.phi);
            let blocks = [spec.trend(), spec.slope(), spec.seasonal()];
            let mut covs = Vec::with_capacity(3);
            for (b, rows) in blocks.iter().enumerate() {
                let tb = t_mat.rows(rows.start, n).into_owned();
                let s11 = sums.s11.view((rows.start, rows.start), (n, n));
                let s10_b = sums.s10.rows(rows.start, n).into_owned();
                // E[(a_{t+1,B} - T_B a_t)(...)']
                let cross = &s10_b * tb.transpose();
                let mut sc = s11 - &cross - cross.transpose() + &tb * &sums.s00 * tb.transpose();
                linalg::symmetrize(&mut sc);
                let prior = hyper.state_scale(n, b);
                covs.push(m_step_covariance(&sc, (nt - 1) as f64, hyper.nu, &prior, graph)?.0);
            }
            next.sigma_w = covs.pop().expect("three blocks");
            next.sigma_v = covs.pop().expect("three blocks");
            next.sigma_u = covs.pop().expect("three blocks");
        }
        Ok(next)
    }
}

fn beta_log_prior(theta: f64, z1: f64, z2: f64) -> f64 {
    let term = |shape: f64, x: f64| if shape == 1.0 { 0.0 } else { (shape - 1.0) * x.ln() };
    term(z1, theta) + term(z2, 1.0 - theta)
}

fn gwishart_log_prior(cov: &DMatrix<f64>, df: f64, rate: &DMatrix<f64>) -> Result<f64> {
    let k = linalg::spd_inverse(cov, "covariance")?;
    let log_det = linalg::log_det_spd(&k, "precision")?;
    Ok(0.5 * (df - 2.0) * log_det - 0.5 * rate.component_mul(&k).sum())
}

/// Runs EM at a single spike variance `v0`, starting from `init` (or the
/// default start when `None`).
pub fn run_emvs(
    panel: &TimeSeriesPanel,
    problem: &EmvsProblem,
    v0: f64,
    init: Option<&EmvsState>,
) -> Result<EmvsState> {
    let cfg = &problem.config;
    if !(v0 > 0.0 && v0 < cfg.v1) {
        return Err(Error::InvalidArgument(format!("v0 = {v0} must lie in (0, v1)")));
    }
    let n = panel.n_series();
    let p = panel.n_controls();
    if panel.graph.n_nodes() != n || problem.hyper.h.shape() != (n, n) {
        return Err(Error::Dimension("graph or prior scale does not match the panel".into()));
    }
    let ws = Workspace::new(panel, problem)?;
    let mut state = match init {
        Some(s) => {
            let mut s = s.clone();
            s.q_trace.clear();
            s.iterations = 0;
            s.converged = false;
            if problem.model == EmvsModel::Nonstationary {
                s.phi = DMatrix::identity(n, n);
            }
            s
        }
        None => EmvsState::initial(n, p, problem.model),
    };
    if state.beta.len() != p {
        return Err(Error::Dimension("initial state does not match the panel".into()));
    }
    if panel.n_time() == 0 {
        state.converged = true;
        return Ok(state);
    }

    let mut ex = ws.expectations(&state)?;
    state.q_value = ws.objective(&state, ex.loglik, v0)?;
    state.q_trace.push(state.q_value);
    for iter in 1..=cfg.max_iters {
        let mut next = ws.m_step(&state, &ex, v0)?;
        let next_ex = ws.expectations(&next)?;
        next.q_value = ws.objective(&next, next_ex.loglik, v0)?;
        let prev = state.q_value;
        let drop = prev - next.q_value;
        if drop > MONOTONE_SLACK * prev.abs().max(1.0) {
            return Err(Error::NonMonotone { iteration: iter, drop });
        }
        next.q_trace = std::mem::take(&mut state.q_trace);
        next.q_trace.push(next.q_value);
        next.iterations = iter;
        state = next;
        ex = next_ex;
        if (state.q_value - prev).abs() < cfg.convergence_tol * prev.abs().max(1.0) {
            state.converged = true;
            break;
        }
    }
    let beta: Vec<f64> = state.beta.iter().copied().collect();
    let (w, a) = e_step_gamma(&beta, state.theta, v0, cfg.v1, cfg.temperature);
    state.w = w;
    state.a_star = a;
    Ok(state)
}

/// One point of the regularization path.
#[derive(Debug, Clone)]
pub struct PathPoint {
    pub v0: f64,
    pub state: EmvsState,
    pub threshold: Threshold,
}

impl PathPoint {
    /// Indices with `|beta_i|` above the threshold.
    pub fn selected(&self) -> Vec<usize> {
        self.state
            .beta
            .iter()
            .enumerate()
            .filter(|(_, b)| b.abs() > self.threshold.value)
            .map(|(i, _)| i)
            .collect()
    }

    /// Coefficients with the sub-threshold entries set to zero.
    pub fn thresholded_beta(&self) -> DVector<f64> {
        self.state
            .beta
            .map(|b| if b.abs() > self.threshold.value { b } else { 0.0 })
    }
}

/// Runs every grid point. With `warm_start`, points are visited from the
/// largest `v0` down, each starting from the previous solution with its
/// sub-threshold coefficients set to zero; otherwise every point starts
/// from the default state and the points run in parallel. The result is in
/// grid order either way.
pub fn v0_grid_scan(panel: &TimeSeriesPanel, problem: &EmvsProblem, warm_start: bool) -> Result<Vec<PathPoint>> {
    let cfg = &problem.config;
    cfg.validate()?;
    let mut out: Vec<Option<PathPoint>> = vec![None; cfg.v0_grid.len()];
    if warm_start {
        let mut order: Vec<usize> = (0..cfg.v0_grid.len()).collect();
        order.sort_by(|&a, &b| cfg.v0_grid[b].total_cmp(&cfg.v0_grid[a]));
        let mut prev: Option<EmvsState> = None;
        for &g in &order {
            let v0 = cfg.v0_grid[g];
            let state = run_emvs(panel, problem, v0, prev.as_ref())?;
            let threshold = selection_threshold(v0, cfg.v1, state.theta);
            let point = PathPoint { v0, state, threshold };
            let mut next = point.state.clone();
            next.beta = point.thresholded_beta();
            prev = Some(next);
            out[g] = Some(point);
        }
    } else {
        use rayon::prelude::*;
        let results: Vec<Result<PathPoint>> = cfg
            .v0_grid
            .par_iter()
            .map(|&v0| {
                let state = run_emvs(panel, problem, v0, None)?;
                let threshold = selection_threshold(v0, cfg.v1, state.theta);
                Ok(PathPoint { v0, state, threshold })
            })
            .collect();
        for (g, r) in results.into_iter().enumerate() {
            out[g] = Some(r?);
        }
    }
    Ok(out.into_iter().map(|p| p.expect("every grid point visited")).collect())
}
