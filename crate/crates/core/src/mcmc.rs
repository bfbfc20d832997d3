//! Gibbs sampler for the structural model on regression-adjusted data.
//!
//! One sweep draws the states with the simulation smoother, the stationary
//! slope coefficient by random-walk Metropolis-Hastings on its unrestricted
//! parameters, the slope mean `D` from its Gaussian conditional, and the
//! covariances from their G-Wishart conditionals. The slope covariance is the
//! anchor of the stationary map, so its G-Wishart draw is used as an
//! independence-type proposal with a Metropolis-Hastings correction.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::gwishart::{self, NonDecomposable};
use crate::linalg;
use crate::state_space::{simulation_smoother_with, FilterOptions};
use crate::stationary::{self, StationaryVarParams};
use crate::structural::{self, ComponentParams, SlopeMode, StructuralSpec, UnivariatePriors};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub n_iters: usize,
    pub n_burnin: usize,
    pub thinning: usize,
    /// Initial random-walk standard deviation for each stationary-map parameter.
    pub phi_step: f64,
    /// Burn-in tuning of the random walk: a Robbins-Monro global scale, and
    /// a proposal covariance taken from the burn-in draws. Frozen afterwards.
    pub adapt: bool,
    pub target_accept: f64,
    /// Probability of proposing a flip of the reflection indicator.
    pub iota_flip_prob: f64,
    pub seed: u64,
    pub nondecomposable: NonDecomposable,
    /// Passed to the filter inside the simulation smoother.
    pub steady_state_tol: Option<f64>,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            n_iters: 10_000,
            n_burnin: 2_000,
            thinning: 1,
            phi_step: 0.1,
            adapt: true,
            target_accept: 0.25,
            iota_flip_prob: 0.5,
            seed: 0,
            nondecomposable: NonDecomposable::Complete,
            steady_state_tol: None,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iters > 0 && self.n_burnin >= self.n_iters {
            return Err(Error::Validation(format!(
                "burn-in {} must be below the iteration count {}",
                self.n_burnin, self.n_iters
            )));
        }
        if self.thinning == 0 {
            return Err(Error::Validation("thinning must be at least 1".into()));
        }
        if !(self.phi_step >= 0.0) || !(0.0..=1.0).contains(&self.iota_flip_prob) {
            return Err(Error::Validation("invalid proposal settings".into()));
        }
        Ok(())
    }
}

/// Priors of the multivariate model.
#[derive(Debug, Clone, PartialEq)]
pub struct McmcPriors {
    pub nu: f64,
    pub h: DMatrix<f64>,
    /// `k1, k2, k3`: the state covariance priors have scale `k^2 (n + 1) H`.
    pub k: [f64; 3],
    /// Variance of the normal prior on each stationary-map parameter.
    pub phi_param_var: f64,
    /// Prior probability of the reflection.
    pub iota_prob: f64,
    /// Variance of the `N(0, d_var I)` prior on `D`.
    pub d_var: f64,
    /// Initial-state variance.
    pub init_var: f64,
    /// Initial slope variance under a random-walk slope.
    pub diffuse_var: f64,
}

impl McmcPriors {
    pub fn default_for(n: usize) -> Self {
        McmcPriors {
            nu: 1.0,
            h: DMatrix::identity(n, n),
            k: [0.1; 3],
            phi_param_var: 5.0,
            iota_prob: 0.5,
            d_var: 1.0,
            init_var: 1.0,
            diffuse_var: 1e6,
        }
    }

    /// `k_b^2 (n + 1) H` for block `b` (0 trend, 1 slope, 2 seasonal).
    pub fn state_rate(&self, n: usize, block: usize) -> DMatrix<f64> {
        &self.h * (self.k[block].powi(2) * (n as f64 + 1.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ChainModel {
    Multivariate(McmcPriors),
    /// Single series with Gamma priors on the precisions.
    Univariate(UnivariatePriors),
}

/// Starting values. The states are drawn first, so none are needed.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainInit {
    pub params: ComponentParams,
    pub phi_params: Option<StationaryVarParams>,
}

impl ChainInit {
    /// Identity covariances, `D = 0`; a stationary slope starts from the
    /// prior mean of its parameters.
    pub fn default_for(spec: &StructuralSpec) -> Self {
        let n = spec.n_series;
        let mut params = ComponentParams::default_for(n);
        params.sigma_u *= 0.01;
        params.sigma_v *= 0.01;
        params.sigma_w *= 0.01;
        Self::with_params(spec, params)
    }

    /// Covariances taken from `params`; `Phi` and `D` are re-initialized.
    pub fn with_params(spec: &StructuralSpec, mut params: ComponentParams) -> Self {
        let n = spec.n_series;
        params.d = DVector::zeros(n);
        match spec.slope_mode {
            SlopeMode::RandomWalk => {
                params.phi = DMatrix::identity(n, n);
                ChainInit {
                    params,
                    phi_params: None,
                }
            }
            SlopeMode::Stationary => {
                let k = n * (n - 1) / 2;
                let pp = StationaryVarParams {
                    chol_lower: vec![0.0; k],
                    log_diag: vec![0.0; n],
                    skew_lower: vec![0.0; k],
                    reflect: false,
                };
                params.phi = DMatrix::zeros(n, n);
                ChainInit {
                    params,
                    phi_params: Some(pp),
                }
            }
        }
    }
}

impl ChainInit {
    /// Covariances and a stationary `Phi` from point estimates (for instance
    /// the selection stage); `D = 0`. Falls back to the prior mean of the map
    /// parameters when `params.phi` cannot be mapped back.
    pub fn from_estimates(spec: &StructuralSpec, params: ComponentParams) -> Self {
        let phi = params.phi.clone();
        let sigma_v = params.sigma_v.clone();
        let mut init = Self::with_params(spec, params);
        if spec.slope_mode == SlopeMode::Stationary && stationary::is_schur_stable(&phi) {
            if let Ok(pp) = stationary::from_phi(&phi, &sigma_v) {
                init.params.phi = phi;
                init.phi_params = Some(pp);
            }
        }
        init
    }
}

/// One retained sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub iteration: usize,
    pub params: ComponentParams,
    pub reflect: bool,
    /// State at the last time point.
    pub last_state: DVector<f64>,
    /// Trend rows from the requested start to the end, `n x len`.
    pub trend_window: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub spec: StructuralSpec,
    pub draws: Vec<Draw>,
    pub phi_accepted: usize,
    pub phi_proposed: usize,
    pub sigma_v_accepted: usize,
    pub sigma_v_proposed: usize,
    /// Random-walk scale after burn-in adaptation.
    pub phi_step: f64,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn phi_acceptance(&self) -> Option<f64> {
        (self.phi_proposed > 0).then(|| self.phi_accepted as f64 / self.phi_proposed as f64)
    }

    pub fn sigma_v_acceptance(&self) -> Option<f64> {
        (self.sigma_v_proposed > 0).then(|| self.sigma_v_accepted as f64 / self.sigma_v_proposed as f64)
    }

    pub fn trace(&self, f: impl Fn(&Draw) -> f64) -> Vec<f64> {
        self.draws.iter().map(f).collect()
    }

    /// Named scalar traces: covariance diagonals, `Phi` entries and `D`.
    pub fn scalar_traces(&self) -> Vec<(String, Vec<f64>)> {
        let n = self.spec.n_series;
        let mut out = Vec::new();
        let covs: [(&str, fn(&ComponentParams) -> &DMatrix<f64>); 4] = [
            ("sigma", |p| &p.sigma),
            ("sigma_u", |p| &p.sigma_u),
            ("sigma_v", |p| &p.sigma_v),
            ("sigma_w", |p| &p.sigma_w),
        ];
        for (name, get) in covs {
            for i in 0..n {
                out.push((format!("{name}[{i},{i}]"), self.trace(|d| get(&d.params)[(i, i)])));
            }
        }
        if self.spec.slope_mode == SlopeMode::Stationary {
            for i in 0..n {
                for j in 0..n {
                    out.push((format!("phi[{i},{j}]"), self.trace(|d| d.params.phi[(i, j)])));
                }
            }
            for i in 0..n {
                out.push((format!("d[{i}]"), self.trace(|d| d.params.d[i])));
            }
        }
        out
    }
}

/// Runs the chain on `data` (`n x T`, regression effect already removed).
/// With `trend_from = Some(s)` every retained draw keeps the trend from time
/// `s` on.
pub fn run_chain(
    data: &DMatrix<f64>,
    spec: &StructuralSpec,
    model: &ChainModel,
    init: &ChainInit,
    config: &McmcConfig,
    trend_from: Option<usize>,
) -> Result<PosteriorDraws> {
    config.validate()?;
    let n = spec.n_series;
    let nt = data.ncols();
    if data.nrows() != n {
        return Err(Error::Dimension(format!("data has {} rows for {n} series", data.nrows())));
    }
    if let Some(s) = trend_from {
        if s > nt {
            return Err(Error::InvalidArgument(format!("trend window start {s} beyond T = {nt}")));
        }
    }
    init.params.validate(spec)?;
    if let ChainModel::Univariate(_) = model {
        if n != 1 {
            return Err(Error::Dimension("univariate chain needs a single series".into()));
        }
    }
    if let ChainModel::Multivariate(pr) = model {
        if pr.h.shape() != (n, n) || pr.nu <= 0.0 {
            return Err(Error::Validation("invalid G-Wishart hyperparameters".into()));
        }
    }
    let stationary = spec.slope_mode == SlopeMode::Stationary;
    if stationary && matches!(model, ChainModel::Multivariate(_)) && init.phi_params.is_none() {
        return Err(Error::InvalidArgument("stationary chain needs initial map parameters".into()));
    }

    let mut s = Sampler::new(data, spec, model, config, init)?;
    let mut out = PosteriorDraws {
        spec: spec.clone(),
        draws: Vec::with_capacity(config.n_iters.saturating_sub(config.n_burnin) / config.thinning + 1),
        phi_accepted: 0,
        phi_proposed: 0,
        sigma_v_accepted: 0,
        sigma_v_proposed: 0,
        phi_step: config.phi_step,
    };
    for iter in 0..config.n_iters {
        let burn = iter < config.n_burnin;
        s.sweep(iter, burn)
            .map_err(|e| Error::Chain {
                iteration: iter,
                source: Box::new(e),
            })?;
        if !burn {
            out.phi_accepted += s.last_phi_accept as usize;
            out.phi_proposed += s.last_phi_proposed as usize;
            out.sigma_v_accepted += s.last_sv_accept as usize;
            out.sigma_v_proposed += s.last_sv_proposed as usize;
            if (iter - config.n_burnin).is_multiple_of(config.thinning) {
                out.draws.push(s.snapshot(iter, trend_from));
            }
        }
    }
    out.phi_step = s.phi_step;
    Ok(out)
}

struct Sampler<'a> {
    data: &'a DMatrix<f64>,
    spec: &'a StructuralSpec,
    model: &'a ChainModel,
    config: &'a McmcConfig,
    graph: Graph,
    init_cov: DMatrix<f64>,
    rng: ChaCha8Rng,
    params: ComponentParams,
    phi_params: Option<StationaryVarParams>,
    states: DMatrix<f64>,
    phi_step: f64,
    phi_factor: DMatrix<f64>,
    history: Welford,
    next_refresh: usize,
    last_phi_accept: bool,
    last_phi_proposed: bool,
    last_sv_accept: bool,
    last_sv_proposed: bool,
}

/// Sufficient statistics of the slope transitions given `D`:
/// `x_t = tau_t - D`, `y_t = tau_{t+1} - D`.
#[derive(Debug, Clone, PartialEq)]
pub struct VarStats {
    pub syy: DMatrix<f64>,
    pub syx: DMatrix<f64>,
    pub sxx: DMatrix<f64>,
    pub count: usize,
}

impl VarStats {
    /// `tau` is the `n x T` slope path.
    pub fn from_path(tau: &DMatrix<f64>, d: &DVector<f64>) -> Self {
        let n = tau.nrows();
        let nt = tau.ncols();
        let mut st = VarStats {
            syy: DMatrix::zeros(n, n),
            syx: DMatrix::zeros(n, n),
            sxx: DMatrix::zeros(n, n),
            count: nt.saturating_sub(1),
        };
        for t in 0..nt.saturating_sub(1) {
            let x = tau.column(t) - d;
            let y = tau.column(t + 1) - d;
            st.syy += &y * y.transpose();
            st.syx += &y * x.transpose();
            st.sxx += &x * x.transpose();
        }
        st
    }

    /// `sum (y - Phi x)(y - Phi x)'`
    pub fn scatter(&self, phi: &DMatrix<f64>) -> DMatrix<f64> {
        let a = phi * self.syx.transpose();
        let mut s = &self.syy - &a - a.transpose() + phi * &self.sxx * phi.transpose();
        linalg::symmetrize(&mut s);
        s
    }

    /// Log-likelihood in `Phi` up to a constant: `-tr(Sv^{-1} S(Phi)) / 2`.
    pub fn log_likelihood(&self, phi: &DMatrix<f64>, sv_inv: &DMatrix<f64>) -> f64 {
        -0.5 * self.scatter(phi).component_mul(sv_inv).sum()
    }
}

/// Random-walk Metropolis-Hastings update of the stationary map parameters
/// with `Sigma_v` as anchor. The increment is `factor z` with `z` standard
/// normal. Returns whether the proposal was accepted.
#[allow(clippy::too_many_arguments)]
pub fn phi_mh_step<R: Rng + ?Sized>(
    rng: &mut R,
    stats: &VarStats,
    params: &mut StationaryVarParams,
    phi: &mut DMatrix<f64>,
    sigma_v: &DMatrix<f64>,
    priors: &McmcPriors,
    factor: &DMatrix<f64>,
    flip_prob: f64,
) -> Result<bool> {
    let n = phi.nrows();
    if factor.shape() != (n * n, n * n) {
        return Err(Error::Dimension("proposal factor must be n^2 x n^2".into()));
    }
    let sv_inv = linalg::spd_inverse(sigma_v, "slope covariance")?;
    let theta = params.to_vector();
    let step = factor * linalg::standard_normal_vector(rng, n * n);
    let prop_theta: Vec<f64> = theta.iter().zip(step.iter()).map(|(x, s)| x + s).collect();
    let flip = rng.random::<f64>() < flip_prob;
    let prop_reflect = params.reflect ^ flip;
    let proposal = StationaryVarParams::from_vector(n, &prop_theta, prop_reflect)?;

    let log_prior = |v: &[f64], reflect: bool| {
        let q = if reflect { priors.iota_prob } else { 1.0 - priors.iota_prob };
        -v.iter().map(|x| x * x).sum::<f64>() / (2.0 * priors.phi_param_var) + q.ln()
    };
    let Ok((phi_new, _)) = stationary::to_phi(&proposal, sigma_v) else {
        return Ok(false);
    };
    let log_ratio = stats.log_likelihood(&phi_new, &sv_inv) + log_prior(&prop_theta, prop_reflect)
        - stats.log_likelihood(phi, &sv_inv)
        - log_prior(&theta, params.reflect);
    let accept = log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio;
    if accept {
        *phi = phi_new;
        *params = proposal;
    }
    Ok(accept)
}

/// Conditional of `D` under a `N(0, d_var I)` prior:
/// `V^{-1} = I/d_var + (T-1)(I-Phi)' Sv^{-1} (I-Phi)`,
/// `m = V (I-Phi)' Sv^{-1} sum_t (tau_{t+1} - Phi tau_t)`. Returns `(m, V)`.
pub fn slope_mean_conditional(
    tau: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    sigma_v: &DMatrix<f64>,
    d_var: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = tau.nrows();
    let nt = tau.ncols();
    let sv_inv = linalg::spd_inverse(sigma_v, "slope covariance")?;
    let a = DMatrix::identity(n, n) - phi;
    let at_sv = a.transpose() * &sv_inv;
    let mut prec = DMatrix::identity(n, n) / d_var + (&at_sv * &a) * nt.saturating_sub(1) as f64;
    linalg::symmetrize(&mut prec);
    let mut acc = DVector::zeros(n);
    for t in 0..nt.saturating_sub(1) {
        acc += tau.column(t + 1) - phi * tau.column(t);
    }
    let cov = linalg::spd_inverse(&prec, "slope mean precision")?;
    let mean = &cov * (at_sv * acc);
    Ok((mean, cov))
}

/// Update of `Sigma_v` when it also anchors the stationary map. The proposal
/// is the G-Wishart conditional `GW(df, prior_rate + S(Phi))` at the current
/// `Phi`; the Metropolis-Hastings ratio corrects for `Phi` moving with the
/// anchor. On graphs without an exact normalizer the proposal normalizers are
/// treated as equal.
#[allow(clippy::too_many_arguments)]
pub fn anchor_covariance_step<R: Rng + ?Sized>(
    rng: &mut R,
    stats: &VarStats,
    params: &StationaryVarParams,
    sigma_v: &mut DMatrix<f64>,
    phi: &mut DMatrix<f64>,
    df: f64,
    prior_rate: &DMatrix<f64>,
    graph: &Graph,
    fallback: NonDecomposable,
) -> Result<bool> {
    let k_cur = linalg::spd_inverse(sigma_v, "slope covariance")?;
    let rate_cur = prior_rate + stats.scatter(phi);
    let k_new = gwishart::sample_gwishart(df, &rate_cur, graph, fallback, rng)?;
    let sv_new = linalg::spd_inverse(&k_new, "G-Wishart draw")?;
    let Ok((phi_new, _)) = stationary::to_phi(params, &sv_new) else {
        return Ok(false);
    };
    let rate_new = prior_rate + stats.scatter(&phi_new);

    // Target and proposal share the log-determinant term, which cancels.
    let quad = |k: &DMatrix<f64>, rate: &DMatrix<f64>| -0.5 * rate.component_mul(k).sum();
    let norm = |rate: &DMatrix<f64>| -> Result<f64> {
        Ok(gwishart::log_normalizer_rate_part(df, rate, graph)?.unwrap_or(0.0))
    };
    let log_ratio = quad(&k_new, &rate_new) - quad(&k_cur, &rate_cur) + quad(&k_cur, &rate_new) - norm(&rate_new)?
        - quad(&k_new, &rate_cur)
        + norm(&rate_cur)?;
    let accept = log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio;
    if accept {
        *sigma_v = sv_new;
        *phi = phi_new;
    }
    Ok(accept)
}

impl<'a> Sampler<'a> {
    fn new(
        data: &'a DMatrix<f64>,
        spec: &'a StructuralSpec,
        model: &'a ChainModel,
        config: &'a McmcConfig,
        init: &ChainInit,
    ) -> Result<Self> {
        let m = spec.state_dim();
        let (init_var, diffuse) = match model {
            ChainModel::Multivariate(p) => (p.init_var, p.diffuse_var),
            ChainModel::Univariate(_) => (1.0, 1e6),
        };
        let mut init_cov = DMatrix::identity(m, m) * init_var;
        if spec.slope_mode == SlopeMode::RandomWalk {
            for k in spec.slope() {
                init_cov[(k, k)] = diffuse;
            }
        }
        let mut params = init.params.clone();
        let phi_params = match (model, spec.slope_mode) {
            (ChainModel::Multivariate(_), SlopeMode::Stationary) => {
                let pp = init.phi_params.clone().expect("checked by run_chain");
                params.phi = stationary::to_phi(&pp, &params.sigma_v)?.0;
                Some(pp)
            }
            _ => None,
        };
        if spec.slope_mode == SlopeMode::RandomWalk {
            params.phi = DMatrix::identity(spec.n_series, spec.n_series);
            params.d.fill(0.0);
        }
        Ok(Sampler {
            data,
            spec,
            model,
            config,
            graph: spec.graph.clone(),
            init_cov,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            params,
            phi_params,
            states: DMatrix::zeros(m, data.ncols()),
            phi_step: config.phi_step,
            phi_factor: DMatrix::identity(spec.n_series.pow(2), spec.n_series.pow(2)),
            history: Welford::new(spec.n_series.pow(2)),
            next_refresh: 100,
            last_phi_accept: false,
            last_phi_proposed: false,
            last_sv_accept: false,
            last_sv_proposed: false,
        })
    }

    fn snapshot(&self, iteration: usize, trend_from: Option<usize>) -> Draw {
        let nt = self.states.ncols();
        let tr = self.spec.trend();
        Draw {
            iteration,
            params: self.params.clone(),
            reflect: self.phi_params.as_ref().is_some_and(|p| p.reflect),
            last_state: if nt > 0 {
                self.states.column(nt - 1).into_owned()
            } else {
                DVector::zeros(self.spec.state_dim())
            },
            trend_window: trend_from.map(|s| self.states.view((tr.start, s), (tr.len(), nt - s)).into_owned()),
        }
    }

    fn sweep(&mut self, iter: usize, burn: bool) -> Result<()> {
        self.last_phi_accept = false;
        self.last_phi_proposed = false;
        self.last_sv_accept = false;
        self.last_sv_proposed = false;

        self.draw_states()?;
        match self.model {
            ChainModel::Multivariate(pr) => {
                if self.spec.slope_mode == SlopeMode::Stationary {
                    self.draw_phi(pr, iter, burn)?;
                    self.draw_d(pr.d_var)?;
                }
                self.draw_covariances(pr)?;
            }
            ChainModel::Univariate(pr) => {
                if self.spec.slope_mode == SlopeMode::Stationary {
                    self.draw_scalar_phi(pr)?;
                    self.draw_d(pr.d_sd * pr.d_sd)?;
                }
                self.draw_variances(pr)?;
            }
        }
        Ok(())
    }

    fn draw_states(&mut self) -> Result<()> {
        let m = self.spec.state_dim();
        let sys = structural::assemble_system(self.spec, &self.params, &DVector::zeros(m), &self.init_cov)?;
        let options = FilterOptions {
            steady_state_tol: self.config.steady_state_tol,
        };
        self.states = simulation_smoother_with(&sys, self.data, &mut self.rng, options)?;
        Ok(())
    }

    fn tau(&self) -> DMatrix<f64> {
        let sl = self.spec.slope();
        self.states.rows(sl.start, sl.len()).into_owned()
    }

    fn var_stats(&self, d: &DVector<f64>) -> VarStats {
        VarStats::from_path(&self.tau(), d)
    }

    fn draw_phi(&mut self, pr: &McmcPriors, iter: usize, burn: bool) -> Result<()> {
        let stats = self.var_stats(&self.params.d);
        let pp = self.phi_params.as_mut().expect("stationary chain");
        let factor = &self.phi_factor * self.phi_step;
        let accepted = phi_mh_step(
            &mut self.rng,
            &stats,
            pp,
            &mut self.params.phi,
            &self.params.sigma_v,
            pr,
            &factor,
            self.config.iota_flip_prob,
        )?;
        self.last_phi_accept = accepted;
        self.last_phi_proposed = true;
        if burn && self.config.adapt && self.phi_step > 0.0 {
            let gain = 1.0 / ((iter + 1) as f64).powf(0.6);
            let a = if accepted { 1.0 } else { 0.0 };
            self.phi_step = (self.phi_step.ln() + gain * (a - self.config.target_accept))
                .exp()
                .clamp(1e-5, 10.0);
            self.history.push(&DVector::from_vec(pp.to_vector()));
            // proposal covariance from the draws since the last refresh
            if iter + 1 == self.next_refresh && self.history.count > 2 * self.history.mean.len() {
                let d = self.history.mean.len();
                let mut cov = self.history.covariance();
                for k in 0..d {
                    cov[(k, k)] += 1e-8;
                }
                if let Ok(l) = linalg::cholesky_lower(&cov, "proposal covariance") {
                    if self.phi_factor == DMatrix::identity(d, d) {
                        self.phi_step = 2.38 / (d as f64).sqrt();
                    }
                    self.phi_factor = l;
                }
                self.history = Welford::new(d);
            }
            if iter + 1 == self.next_refresh {
                self.next_refresh *= 2;
            }
        }
        Ok(())
    }

    fn draw_d(&mut self, d_var: f64) -> Result<()> {
        let (mean, cov) = slope_mean_conditional(&self.tau(), &self.params.phi, &self.params.sigma_v, d_var)?;
        let factor = linalg::cholesky_lower(&cov, "slope mean covariance")?;
        self.params.d = linalg::gaussian_draw(&mut self.rng, &mean, &factor);
        Ok(())
    }

    /// Observation residuals with missing entries drawn from their
    /// conditional given the observed ones.
    fn obs_residuals(&mut self) -> Result<DMatrix<f64>> {
        let z = structural::observation_matrix(self.spec);
        let mut e = self.data - &z * &self.states;
        let n = e.nrows();
        let sigma = &self.params.sigma;
        for t in 0..e.ncols() {
            let mis: Vec<usize> = (0..n).filter(|&i| e[(i, t)].is_nan()).collect();
            if mis.is_empty() {
                continue;
            }
            let obs: Vec<usize> = (0..n).filter(|&i| !e[(i, t)].is_nan()).collect();
            let s_mm = sigma.select_rows(mis.iter()).select_columns(mis.iter());
            let (mean, cov) = if obs.is_empty() {
                (DVector::zeros(mis.len()), s_mm)
            } else {
                let s_oo = sigma.select_rows(obs.iter()).select_columns(obs.iter());
                let s_mo = sigma.select_rows(mis.iter()).select_columns(obs.iter());
                let b = &s_mo * linalg::spd_inverse(&s_oo, "observed covariance block")?;
                let e_o = DVector::from_iterator(obs.len(), obs.iter().map(|&i| e[(i, t)]));
                let mut c = s_mm - &b * s_mo.transpose();
                linalg::symmetrize(&mut c);
                (&b * e_o, c)
            };
            let draw = linalg::gaussian_draw(&mut self.rng, &mean, &linalg::psd_factor(&cov));
            for (a, &i) in mis.iter().enumerate() {
                e[(i, t)] = draw[a];
            }
        }
        Ok(e)
    }

    /// `alpha_{t+1,B} - c_B - T_B alpha_t` for `t = 0..T-2`, scatter over `t`.
    fn state_scatter(&self, rows: std::ops::Range<usize>, phi: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
        let t_mat = structural::transition_matrix(self.spec, phi);
        let c = structural::state_intercept(self.spec, phi, d);
        let tb = t_mat.rows(rows.start, rows.len()).into_owned();
        let cb = c.rows(rows.start, rows.len()).into_owned();
        let nt = self.states.ncols();
        let mut s = DMatrix::zeros(rows.len(), rows.len());
        for t in 0..nt.saturating_sub(1) {
            let r = self.states.view((rows.start, t + 1), (rows.len(), 1)) - &cb - &tb * self.states.column(t);
            s += &r * r.transpose();
        }
        linalg::symmetrize(&mut s);
        s
    }

    fn gwishart_cov(&mut self, df: f64, rate: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let k = gwishart::sample_gwishart(df, rate, &self.graph, self.config.nondecomposable, &mut self.rng)?;
        linalg::spd_inverse(&k, "G-Wishart draw")
    }

    fn draw_covariances(&mut self, pr: &McmcPriors) -> Result<()> {
        let n = self.spec.n_series;
        let nt = self.states.ncols();
        let transitions = nt.saturating_sub(1) as f64;

        let e = self.obs_residuals()?;
        let mut scatter = &e * e.transpose();
        linalg::symmetrize(&mut scatter);
        let rate = &pr.h + scatter;
        self.params.sigma = self.gwishart_cov(pr.nu + nt as f64, &rate)?;

        let phi = self.params.phi.clone();
        let d = self.params.d.clone();
        let s_u = self.state_scatter(self.spec.trend(), &phi, &d);
        self.params.sigma_u = self.gwishart_cov(pr.nu + transitions, &(pr.state_rate(n, 0) + s_u))?;

        if self.spec.slope_mode == SlopeMode::Stationary {
            self.draw_anchor_covariance(pr)?;
        } else {
            let s_v = self.state_scatter(self.spec.slope(), &phi, &d);
            self.params.sigma_v = self.gwishart_cov(pr.nu + transitions, &(pr.state_rate(n, 1) + s_v))?;
        }

        let s_w = self.state_scatter(self.spec.seasonal(), &self.params.phi.clone(), &d);
        self.params.sigma_w = self.gwishart_cov(pr.nu + transitions, &(pr.state_rate(n, 2) + s_w))?;
        Ok(())
    }

    fn draw_anchor_covariance(&mut self, pr: &McmcPriors) -> Result<()> {
        let n = self.spec.n_series;
        let stats = self.var_stats(&self.params.d);
        let pp = self.phi_params.as_ref().expect("stationary chain");
        let accepted = anchor_covariance_step(
            &mut self.rng,
            &stats,
            pp,
            &mut self.params.sigma_v,
            &mut self.params.phi,
            pr.nu + stats.count as f64,
            &pr.state_rate(n, 1),
            &self.graph,
            self.config.nondecomposable,
        )?;
        self.last_sv_accept = accepted;
        self.last_sv_proposed = true;
        Ok(())
    }

    /// `phi ~ N(m, s^2)` truncated to `(-1, 1)`.
    fn draw_scalar_phi(&mut self, pr: &UnivariatePriors) -> Result<()> {
        let stats = self.var_stats(&self.params.d);
        let sv = self.params.sigma_v[(0, 0)];
        let prec = 1.0 / (pr.phi_sd * pr.phi_sd) + stats.sxx[(0, 0)] / sv;
        let mean = stats.syx[(0, 0)] / sv / prec;
        let sd = prec.sqrt().recip();
        let phi = truncated_normal(&mut self.rng, mean, sd, -1.0, 1.0)?;
        self.params.phi[(0, 0)] = phi;
        Ok(())
    }

    fn draw_variances(&mut self, pr: &UnivariatePriors) -> Result<()> {
        let nt = self.states.ncols();
        let transitions = nt.saturating_sub(1) as f64;
        let e = self.obs_residuals()?;
        let s = e.norm_squared();
        self.params.sigma[(0, 0)] = 1.0 / gamma_draw(&mut self.rng, pr.obs.shape + nt as f64 / 2.0, pr.obs.rate + s / 2.0)?;

        let phi = self.params.phi.clone();
        let d = self.params.d.clone();
        let blocks = [self.spec.trend(), self.spec.slope(), self.spec.seasonal()];
        let mut vars = [0.0; 3];
        for (b, rows) in blocks.into_iter().enumerate() {
            let sc = self.state_scatter(rows, &phi, &d)[(0, 0)];
            vars[b] = 1.0 / gamma_draw(&mut self.rng, pr.state.shape + transitions / 2.0, pr.state.rate + sc / 2.0)?;
        }
        self.params.sigma_u[(0, 0)] = vars[0];
        self.params.sigma_v[(0, 0)] = vars[1];
        self.params.sigma_w[(0, 0)] = vars[2];
        Ok(())
    }
}

/// Running mean and covariance.
struct Welford {
    count: usize,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
}

impl Welford {
    fn new(d: usize) -> Self {
        Welford {
            count: 0,
            mean: DVector::zeros(d),
            m2: DMatrix::zeros(d, d),
        }
    }

    fn push(&mut self, x: &DVector<f64>) {
        self.count += 1;
        let delta = x - &self.mean;
        self.mean += &delta / self.count as f64;
        let delta2 = x - &self.mean;
        self.m2 += &delta * delta2.transpose();
    }

    fn covariance(&self) -> DMatrix<f64> {
        let mut c = &self.m2 / (self.count.max(2) - 1) as f64;
        linalg::symmetrize(&mut c);
        c
    }
}

fn gamma_draw<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> Result<f64> {
    Ok(Gamma::new(shape, 1.0 / rate)
        .map_err(|e| Error::InvalidArgument(format!("gamma draw: {e}")))?
        .sample(rng))
}

/// Inverse-CDF draw from `N(mean, sd^2)` restricted to `(lo, hi)`.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, sd: f64, lo: f64, hi: f64) -> Result<f64> {
    let normal = Normal::new(mean, sd).map_err(|e| Error::InvalidArgument(format!("normal: {e}")))?;
    let (a, b) = (normal.cdf(lo), normal.cdf(hi));
    if b - a < 1e-300 {
        return Ok(if mean <= lo { lo + 1e-12 } else { hi - 1e-12 });
    }
    let u = a + (b - a) * rng.random::<f64>();
    Ok(normal.inverse_cdf(u).clamp(lo + 1e-12, hi - 1e-12))
}

/// Inefficiency factor estimate with its lag cutoff.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inefficiency {
    pub value: f64,
    pub cutoff: usize,
    /// Constant chain: the autocorrelations are undefined and `value` is 1.
    pub degenerate: bool,
}

/// `1 + 2 sum_{l=1}^{L} w(l/L) rho_l` with the Parzen window. The cutoff is
/// `min(1000, N/10)`, reduced to four times the first lag whose
/// autocorrelation falls below `2/sqrt(N)`.
pub fn inefficiency_factor(chain: &[f64]) -> Result<Inefficiency> {
    let len = chain.len();
    if len < 100 {
        return Err(Error::InvalidArgument(format!("chain of length {len} is too short (need 100)")));
    }
    let mean = chain.iter().sum::<f64>() / len as f64;
    let dev: Vec<f64> = chain.iter().map(|x| x - mean).collect();
    let var = dev.iter().map(|x| x * x).sum::<f64>() / len as f64;
    if !(var > 0.0) || !var.is_finite() {
        return Ok(Inefficiency {
            value: 1.0,
            cutoff: 0,
            degenerate: true,
        });
    }
    let max_lag = 1000.min(len / 10);
    let acf = |l: usize| dev[..len - l].iter().zip(&dev[l..]).map(|(a, b)| a * b).sum::<f64>() / (len as f64 * var);
    let band = 2.0 / (len as f64).sqrt();
    let mut rho = Vec::with_capacity(max_lag);
    let mut cutoff = max_lag;
    for l in 1..=max_lag {
        let r = acf(l);
        rho.push(r);
        if r.abs() < band {
            cutoff = (4 * l).min(max_lag);
            break;
        }
    }
    while rho.len() < cutoff {
        rho.push(acf(rho.len() + 1));
    }
    let parzen = |x: f64| {
        if x <= 0.5 {
            1.0 - 6.0 * x * x + 6.0 * x * x * x
        } else if x <= 1.0 {
            2.0 * (1.0 - x).powi(3)
        } else {
            0.0
        }
    };
    let sum: f64 = rho[..cutoff]
        .iter()
        .enumerate()
        .map(|(i, r)| parzen((i + 1) as f64 / cutoff as f64) * r)
        .sum();
    Ok(Inefficiency {
        value: 1.0 + 2.0 * sum,
        cutoff,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_chain_is_degenerate() {
        let f = inefficiency_factor(&[2.0; 200]).unwrap();
        assert!(f.degenerate);
        assert_eq!(f.value, 1.0);
        assert!(inefficiency_factor(&[1.0; 50]).is_err());
    }

    #[test]
    fn truncated_normal_stays_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (m, s) in [(0.0, 1.0), (5.0, 0.1), (-40.0, 0.5), (0.99, 1e-6)] {
            for _ in 0..100 {
                let x = truncated_normal(&mut rng, m, s, -1.0, 1.0).unwrap();
                assert!(x > -1.0 && x < 1.0);
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = McmcConfig::default();
        c.validate().unwrap();
        c.n_burnin = c.n_iters;
        assert!(c.validate().is_err());
    }
}
