//! Counterfactual prediction and the two causal estimands: the temporal
//! average of observed minus counterfactual values, and the one-sided KS
//! distance between trend posteriors with thresholds from pairwise distances
//! among counterfactual re-fits.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::emvs::{self, EmvsModel, EmvsProblem, EmvsState, SpikeSlabConfig};
use crate::error::{Error, Result};
use crate::linalg;
use crate::mcmc::{self, ChainInit, ChainModel, Draw, McmcConfig, McmcPriors, PosteriorDraws};
use crate::panel::{TimeFormat, TimeSeriesPanel};
use crate::structural::{self, SlopeMode, StructuralSpec, UnivariatePriors};

/// Model variant used for both stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelArm {
    MultivariateStationary,
    MultivariateNonstationary,
    /// Each store on its own with Gamma variance priors.
    Univariate,
}

impl ModelArm {
    pub fn slope_mode(self) -> SlopeMode {
        match self {
            ModelArm::MultivariateNonstationary => SlopeMode::RandomWalk,
            _ => SlopeMode::Stationary,
        }
    }

    fn emvs_model(self) -> EmvsModel {
        match self {
            ModelArm::MultivariateNonstationary => EmvsModel::Nonstationary,
            _ => EmvsModel::Stationary,
        }
    }
}

/// G-Wishart hyperparameters shared by both stages; `H = h_scale I`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GWishartHyper {
    pub nu: f64,
    pub h_scale: f64,
    pub k: [f64; 3],
}

impl Default for GWishartHyper {
    fn default() -> Self {
        GWishartHyper {
            nu: 1.0,
            h_scale: 1.0,
            k: [0.1; 3],
        }
    }
}

impl GWishartHyper {
    pub fn validate(&self) -> Result<()> {
        if self.nu > 0.0 && self.h_scale > 0.0 && self.k.iter().all(|&k| k > 0.0) {
            Ok(())
        } else {
            Err(Error::Validation("G-Wishart hyperparameters must be positive".into()))
        }
    }

    pub fn mcmc_priors(&self, n: usize) -> McmcPriors {
        let mut p = McmcPriors::default_for(n);
        p.nu = self.nu;
        p.h = DMatrix::identity(n, n) * self.h_scale;
        p.k = self.k;
        p
    }

    pub fn emvs_problem(&self, arm: ModelArm, seasonal_period: usize, n: usize, config: &SpikeSlabConfig) -> EmvsProblem {
        let mut problem = EmvsProblem::new(arm.emvs_model(), seasonal_period, n);
        problem.config = config.clone();
        problem.hyper.nu = self.nu;
        problem.hyper.h = DMatrix::identity(n, n) * self.h_scale;
        problem.hyper.k = self.k;
        problem
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CausalConfig {
    pub arm: ModelArm,
    pub seasonal_period: usize,
    pub emvs: SpikeSlabConfig,
    pub mcmc: McmcConfig,
    pub hyper: GWishartHyper,
    /// Number of counterfactual datasets.
    pub k: usize,
    /// Upper percentile of the pairwise distances used as threshold.
    pub percentile: f64,
    /// Skip the counterfactual re-fits and report only the difference estimand.
    pub difference_only: bool,
}

impl Default for CausalConfig {
    fn default() -> Self {
        CausalConfig {
            arm: ModelArm::MultivariateStationary,
            seasonal_period: 7,
            emvs: SpikeSlabConfig::default(),
            mcmc: McmcConfig::default(),
            hyper: GWishartHyper::default(),
            k: 30,
            percentile: 0.95,
            difference_only: false,
        }
    }
}

impl CausalConfig {
    pub fn validate(&self) -> Result<()> {
        self.emvs.validate()?;
        self.mcmc.validate()?;
        self.hyper.validate()?;
        if self.seasonal_period < 2 {
            return Err(Error::Validation("seasonal period must be at least 2".into()));
        }
        if !self.difference_only && self.k < 2 {
            return Err(Error::Validation(format!("k = {} but thresholds need k >= 2", self.k)));
        }
        if !(self.percentile > 0.0 && self.percentile <= 1.0) {
            return Err(Error::Validation(format!("percentile {} outside (0, 1]", self.percentile)));
        }
        Ok(())
    }
}

/// Independent seed number `stream` derived from `base`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Simulated post-period paths, each `n x horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualSet {
    pub replicates: Vec<DMatrix<f64>>,
    /// Posterior draw behind each replicate.
    pub draw_indices: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl CounterfactualSet {
    pub fn len(&self) -> usize {
        self.replicates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replicates.is_empty()
    }
}

/// Iterates the state equation of `draw` forward from its last state and
/// adds observation noise. Returns `z alpha_t + eps_t` for `horizon` steps.
pub fn forecast_path<R: Rng + ?Sized>(
    spec: &StructuralSpec,
    draw: &Draw,
    horizon: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let p = &draw.params;
    let n = spec.n_series;
    let t_mat = structural::transition_matrix(spec, &p.phi);
    let c = structural::state_intercept(spec, &p.phi, &p.d);
    let q = structural::block_diag(&[&p.sigma_u, &p.sigma_v, &p.sigma_w]);
    let q_factor = linalg::psd_factor(&q);
    let obs_factor = linalg::psd_factor(&p.sigma);
    let mut alpha = draw.last_state.clone();
    let mut out = DMatrix::zeros(n, horizon);
    for t in 0..horizon {
        let eta = &q_factor * linalg::standard_normal_vector(rng, 3 * n);
        alpha = &c + &t_mat * &alpha;
        for k in 0..3 * n {
            alpha[k] += eta[k];
        }
        let eps = &obs_factor * linalg::standard_normal_vector(rng, n);
        for i in 0..n {
            out[(i, t)] = alpha[i] + alpha[2 * n + i] + eps[i];
        }
    }
    Ok(out)
}

/// `k` posterior predictive paths. Each picks a retained draw at random and
/// adds `regression` (`n x horizon`, the `X beta` term) to the forecast.
pub fn predict_counterfactuals(
    draws: &PosteriorDraws,
    regression: &DMatrix<f64>,
    k: usize,
    seed: u64,
) -> Result<CounterfactualSet> {
    let horizon = regression.ncols();
    if horizon == 0 {
        return Err(Error::InvalidArgument("counterfactual horizon is 0".into()));
    }
    if draws.is_empty() {
        return Err(Error::InvalidArgument("no posterior draws to predict from".into()));
    }
    if regression.nrows() != draws.spec.n_series {
        return Err(Error::Dimension("regression term does not match the series count".into()));
    }
    let mut pick = ChaCha8Rng::seed_from_u64(seed);
    let mut set = CounterfactualSet {
        replicates: Vec::with_capacity(k),
        draw_indices: Vec::with_capacity(k),
        seeds: Vec::with_capacity(k),
    };
    for j in 0..k {
        let idx = pick.random_range(0..draws.len());
        let s = derive_seed(seed, j as u64 + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let path = forecast_path(&draws.spec, &draws.draws[idx], horizon, &mut rng)?;
        set.replicates.push(path + regression);
        set.draw_indices.push(idx);
        set.seeds.push(s);
    }
    Ok(set)
}

/// Posterior summary of one store's temporal average effect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffSummary {
    pub median: f64,
    pub lo95: f64,
    pub hi95: f64,
}

impl DiffSummary {
    /// The 95% interval excludes zero.
    pub fn detects_impact(&self) -> bool {
        self.lo95 > 0.0 || self.hi95 < 0.0
    }

    pub fn width(&self) -> f64 {
        self.hi95 - self.lo95
    }
}

/// Nearest-rank percentile: the `ceil(q N)`-th order statistic of `sorted`.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Per store: median and 95% interval over counterfactual draws of
/// `(1/P) sum_t (Y_obs_t - Y_cf_t)`. Missing observed entries are skipped.
pub fn difference_estimand(observed: &DMatrix<f64>, counterfactuals: &[DMatrix<f64>]) -> Result<Vec<DiffSummary>> {
    if counterfactuals.is_empty() {
        return Err(Error::InvalidArgument("no counterfactual draws".into()));
    }
    if counterfactuals.iter().any(|c| c.shape() != observed.shape()) {
        return Err(Error::Dimension("counterfactual draws and observed data do not align".into()));
    }
    let mut out = Vec::with_capacity(observed.nrows());
    for i in 0..observed.nrows() {
        let cols: Vec<usize> = (0..observed.ncols()).filter(|&t| !observed[(i, t)].is_nan()).collect();
        if cols.is_empty() {
            out.push(DiffSummary {
                median: f64::NAN,
                lo95: f64::NAN,
                hi95: f64::NAN,
            });
            continue;
        }
        let mut avgs: Vec<f64> = counterfactuals
            .iter()
            .map(|c| cols.iter().map(|&t| observed[(i, t)] - c[(i, t)]).sum::<f64>() / cols.len() as f64)
            .collect();
        avgs.sort_by(f64::total_cmp);
        out.push(DiffSummary {
            median: nearest_rank(&avgs, 0.5),
            lo95: nearest_rank(&avgs, 0.025),
            hi95: nearest_rank(&avgs, 0.975),
        });
    }
    Ok(out)
}

/// `max_x (F_a(x) - F_b(x))` over the pooled sample points, floored at 0,
/// with right-continuous empirical CDFs.
pub fn one_sided_ks(sample_a: &[f64], sample_b: &[f64]) -> Result<f64> {
    if sample_a.is_empty() || sample_b.is_empty() {
        return Err(Error::InvalidArgument("KS distance needs two non-empty samples".into()));
    }
    let mut a = sample_a.to_vec();
    let mut b = sample_b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok(ks_sorted(&[&a], &b))
}

/// One-sided distance between the equal-weight mixture of the sorted samples
/// in `mix` and the sorted sample `b`.
fn ks_sorted(mix: &[&[f64]], b: &[f64]) -> f64 {
    let k = mix.len() as f64;
    let mut pos = vec![0usize; mix.len()];
    let mut jb = 0;
    let mut best: f64 = 0.0;
    loop {
        // next evaluation point: smallest unprocessed value on either side
        let mut x = f64::INFINITY;
        for (s, &p) in mix.iter().zip(&pos) {
            if p < s.len() && s[p] < x {
                x = s[p];
            }
        }
        if x == f64::INFINITY {
            break;
        }
        if jb < b.len() && b[jb] < x {
            x = b[jb];
        }
        let mut fa = 0.0;
        for (s, p) in mix.iter().zip(pos.iter_mut()) {
            while *p < s.len() && s[*p] <= x {
                *p += 1;
            }
            fa += *p as f64 / s.len() as f64;
        }
        fa /= k;
        while jb < b.len() && b[jb] <= x {
            jb += 1;
        }
        best = best.max(fa - jb as f64 / b.len() as f64);
    }
    best.clamp(0.0, 1.0)
}

/// Posterior draws of `sum_{t=T+1}^{T+m} mu_it`, sorted, for every store
/// `i` and horizon `m = 1..P`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrendSums {
    pub n_stores: usize,
    pub horizon: usize,
    /// Index `i * horizon + (m - 1)`.
    values: Vec<Vec<f64>>,
}

impl TrendSums {
    /// Uses the trend windows of the draws; they must start at the causal
    /// start and cover `horizon` points.
    pub fn from_draws(draws: &PosteriorDraws, horizon: usize) -> Result<Self> {
        let n = draws.spec.n_series;
        let mut values = vec![Vec::with_capacity(draws.len()); n * horizon];
        for d in &draws.draws {
            let w = d
                .trend_window
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("draws were run without a trend window".into()))?;
            if w.ncols() != horizon {
                return Err(Error::Dimension(format!(
                    "trend window has {} points, expected {horizon}",
                    w.ncols()
                )));
            }
            for i in 0..n {
                let mut acc = 0.0;
                for m in 0..horizon {
                    acc += w[(i, m)];
                    values[i * horizon + m].push(acc);
                }
            }
        }
        Ok(Self::from_values(n, horizon, values))
    }

    /// `values[i * horizon + m]` holds the draws for store `i`, horizon `m + 1`.
    pub fn from_values(n_stores: usize, horizon: usize, mut values: Vec<Vec<f64>>) -> Self {
        assert_eq!(values.len(), n_stores * horizon, "one sample per store and horizon");
        for v in &mut values {
            v.sort_by(f64::total_cmp);
        }
        TrendSums {
            n_stores,
            horizon,
            values,
        }
    }

    /// Sorted draws for store `i` at horizon `m` (1-based).
    pub fn sample(&self, i: usize, m: usize) -> &[f64] {
        &self.values[i * self.horizon + m - 1]
    }
}

fn check_aligned(sets: &[&TrendSums]) -> Result<(usize, usize)> {
    let first = sets[0];
    if sets.iter().any(|s| s.n_stores != first.n_stores || s.horizon != first.horizon) {
        return Err(Error::Dimension("trend sums disagree on stores or horizons".into()));
    }
    if sets.iter().any(|s| s.values.iter().any(|v| v.is_empty())) {
        return Err(Error::InvalidArgument("empty trend sample".into()));
    }
    Ok((first.n_stores, first.horizon))
}

/// KS distance (`n x P`) between the counterfactual fits, with their CDFs
/// averaged, and the observed-data fit.
pub fn ks_trajectories(observed: &TrendSums, counterfactual: &[TrendSums]) -> Result<DMatrix<f64>> {
    if counterfactual.is_empty() {
        return Err(Error::InvalidArgument("no counterfactual fits".into()));
    }
    let mut all: Vec<&TrendSums> = counterfactual.iter().collect();
    all.push(observed);
    let (n, p) = check_aligned(&all)?;
    let mut out = DMatrix::zeros(n, p);
    for i in 0..n {
        for m in 1..=p {
            let mix: Vec<&[f64]> = counterfactual.iter().map(|c| c.sample(i, m)).collect();
            out[(i, m - 1)] = ks_sorted(&mix, observed.sample(i, m));
        }
    }
    Ok(out)
}

/// Per store and horizon, the `percentile` nearest-rank value of the
/// `k (k - 1)` one-sided distances between ordered pairs of fits.
pub fn ks_thresholds(counterfactual: &[TrendSums], percentile: f64) -> Result<DMatrix<f64>> {
    let k = counterfactual.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!("thresholds need k >= 2 fits, got {k}")));
    }
    let all: Vec<&TrendSums> = counterfactual.iter().collect();
    let (n, p) = check_aligned(&all)?;
    let mut out = DMatrix::zeros(n, p);
    for i in 0..n {
        for m in 1..=p {
            let mut d = Vec::with_capacity(k * (k - 1));
            for a in 0..k {
                for b in 0..k {
                    if a != b {
                        d.push(ks_sorted(&[counterfactual[a].sample(i, m)], counterfactual[b].sample(i, m)));
                    }
                }
            }
            d.sort_by(f64::total_cmp);
            out[(i, m - 1)] = nearest_rank(&d, percentile);
        }
    }
    Ok(out)
}

/// Results for one analysed store.
#[derive(Debug, Clone, PartialEq)]
pub struct StoreResult {
    pub store_id: String,
    /// Controls kept by the selection stage.
    pub selected_controls: Vec<String>,
    pub difference: DiffSummary,
    /// Per horizon; empty when only the difference estimand was run.
    pub ks: Vec<f64>,
    pub threshold: Vec<f64>,
}

impl StoreResult {
    pub fn significant(&self, m: usize) -> bool {
        self.ks[m - 1] > self.threshold[m - 1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CausalReport {
    /// Timestamps of the causal window.
    pub timestamps: Vec<i64>,
    pub time_format: TimeFormat,
    pub stores: Vec<StoreResult>,
    /// Stores whose controls were all eliminated.
    pub dropped: Vec<String>,
    pub k: usize,
    pub percentile: f64,
    pub phi_acceptance: Option<f64>,
}

impl CausalReport {
    pub fn horizon(&self) -> usize {
        self.timestamps.len()
    }

    pub fn has_ks(&self) -> bool {
        self.stores.first().is_some_and(|s| !s.ks.is_empty())
    }

    /// Number of significant stores at each horizon.
    pub fn significant_counts(&self) -> Vec<usize> {
        if !self.has_ks() {
            return Vec::new();
        }
        (1..=self.horizon())
            .map(|m| self.stores.iter().filter(|s| s.significant(m)).count())
            .collect()
    }

    pub fn store(&self, id: &str) -> Option<&StoreResult> {
        self.stores.iter().find(|s| s.store_id == id)
    }
}

/// Output of the selection stage on the pre-period.
#[derive(Debug, Clone)]
pub struct SelectionStage {
    pub state: EmvsState,
    pub v0: f64,
    pub threshold: f64,
    /// Thresholded coefficients over all stores.
    pub beta: DVector<f64>,
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
}

/// Runs EMVS on the pre-period at the largest grid value of `v0` and
/// thresholds the coefficients. Stores left without controls are dropped.
pub fn selection_stage(panel: &TimeSeriesPanel, config: &CausalConfig) -> Result<SelectionStage> {
    let pre = panel.pre_period();
    let n = panel.n_series();
    let problem = config.hyper.emvs_problem(config.arm, config.seasonal_period, n, &config.emvs);
    let v0 = config.emvs.v0_grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let state = emvs::run_emvs(&pre, &problem, v0, None)?;
    let threshold = emvs::selection_threshold(v0, config.emvs.v1, state.theta).value;
    let beta = state.beta.map(|b| if b.abs() > threshold { b } else { 0.0 });
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for i in 0..n {
        let off = panel.beta_offset(i);
        let count = panel.controls[i].nrows();
        if beta.rows(off, count).iter().any(|&b| b != 0.0) {
            kept.push(i);
        } else {
            dropped.push(i);
        }
    }
    Ok(SelectionStage {
        state,
        v0,
        threshold,
        beta,
        kept,
        dropped,
    })
}

/// Everything about one (sub)panel that the chains need.
struct Analysis {
    spec: StructuralSpec,
    model: ChainModel,
    init: ChainInit,
    /// `Y - X beta` over the full period.
    resid: DMatrix<f64>,
    t_pre: usize,
}

impl Analysis {
    fn run(&self, data: &DMatrix<f64>, config: &McmcConfig, seed: u64, trend: bool) -> Result<PosteriorDraws> {
        let cfg = McmcConfig {
            seed,
            ..config.clone()
        };
        mcmc::run_chain(data, &self.spec, &self.model, &self.init, &cfg, trend.then_some(self.t_pre))
    }
}

struct SubResult {
    difference: Vec<DiffSummary>,
    ks: Option<(DMatrix<f64>, DMatrix<f64>)>,
    phi_acceptance: Option<f64>,
}

fn analyse(a: &Analysis, config: &CausalConfig, seed: u64) -> Result<SubResult> {
    let n = a.spec.n_series;
    let total = a.resid.ncols();
    let horizon = total - a.t_pre;
    let pre = a.resid.columns(0, a.t_pre).into_owned();
    let post = a.resid.columns(a.t_pre, horizon).into_owned();

    let draws = a.run(&pre, &config.mcmc, derive_seed(seed, 0), false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let paths = draws
        .draws
        .iter()
        .map(|d| forecast_path(&a.spec, d, horizon, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let difference = difference_estimand(&post, &paths)?;
    drop(paths);
    if config.difference_only {
        return Ok(SubResult {
            difference,
            ks: None,
            phi_acceptance: draws.phi_acceptance(),
        });
    }

    let cf = predict_counterfactuals(&draws, &DMatrix::zeros(n, horizon), config.k, derive_seed(seed, 2))?;
    let phi_acceptance = draws.phi_acceptance();
    drop(draws);
    let mut datasets = Vec::with_capacity(config.k + 1);
    datasets.push(a.resid.clone());
    for rep in &cf.replicates {
        let mut full = a.resid.clone();
        full.columns_mut(a.t_pre, horizon).copy_from(rep);
        datasets.push(full);
    }
    let sums = datasets
        .par_iter()
        .enumerate()
        .map(|(j, data)| {
            let d = a.run(data, &config.mcmc, derive_seed(seed, 100 + j as u64), true)?;
            TrendSums::from_draws(&d, horizon)
        })
        .collect::<Result<Vec<_>>>()?;
    let ks = ks_trajectories(&sums[0], &sums[1..])?;
    let thresholds = ks_thresholds(&sums[1..], config.percentile)?;
    Ok(SubResult {
        difference,
        ks: Some((ks, thresholds)),
        phi_acceptance,
    })
}

/// Checks shared by the pipeline entry points; returns the pre-period length.
fn check_inputs(panel: &TimeSeriesPanel, config: &CausalConfig) -> Result<usize> {
    config.validate()?;
    panel.validate()?;
    let t_pre = panel.causal_start;
    if t_pre < config.seasonal_period + 2 {
        return Err(Error::Validation(format!(
            "pre-period of {t_pre} points is shorter than S + 2 = {}",
            config.seasonal_period + 2
        )));
    }
    if panel.n_time() == t_pre {
        return Err(Error::Validation("empty causal window".into()));
    }
    Ok(t_pre)
}

/// Selection stage plus one chain setup per analysed group of stores (all
/// kept stores together, or one store at a time for the univariate arm).
fn prepare(panel: &TimeSeriesPanel, config: &CausalConfig, t_pre: usize) -> Result<(SelectionStage, Vec<(Vec<usize>, Analysis)>)> {
    let sel = selection_stage(panel, config)?;
    if sel.kept.is_empty() {
        return Err(Error::Validation("every store lost all of its controls".into()));
    }
    let groups: Vec<Vec<usize>> = match config.arm {
        ModelArm::Univariate => sel.kept.iter().map(|&i| vec![i]).collect(),
        _ => vec![sel.kept.clone()],
    };
    let mut out = Vec::with_capacity(groups.len());
    for members in groups {
        let sub = panel.select_series(&members);
        let beta = DVector::from_iterator(
            sub.n_controls(),
            members.iter().flat_map(|&i| {
                sel.beta
                    .rows(panel.beta_offset(i), panel.controls[i].nrows())
                    .iter()
                    .copied()
                    .collect::<Vec<_>>()
            }),
        );
        let resid = crate::panel::apply_regression(&sub, &beta)?;
        let n = sub.n_series();
        let spec = StructuralSpec::new(
            n,
            config.seasonal_period,
            config.arm.slope_mode(),
            sub.graph.clone(),
            sub.control_counts(),
        )?;
        let model = match config.arm {
            ModelArm::Univariate => {
                let row: Vec<f64> = sub.observed.row(0).columns(0, t_pre).iter().copied().collect();
                ChainModel::Univariate(UnivariatePriors::from_series(&row)?)
            }
            _ => ChainModel::Multivariate(config.hyper.mcmc_priors(n)),
        };
        let init = if sel.dropped.is_empty() && config.arm != ModelArm::Univariate {
            let s = &sel.state;
            let mut params = structural::ComponentParams::default_for(n);
            params.sigma = s.sigma.clone();
            params.sigma_u = s.sigma_u.clone();
            params.sigma_v = s.sigma_v.clone();
            params.sigma_w = s.sigma_w.clone();
            params.phi = s.phi.clone();
            ChainInit::from_estimates(&spec, params)
        } else {
            ChainInit::default_for(&spec)
        };
        let analysis = Analysis {
            spec,
            model,
            init,
            resid,
            t_pre,
        };
        out.push((members, analysis));
    }
    Ok((sel, out))
}

/// Chain fitted to the pre-period of one group of stores.
#[derive(Debug, Clone)]
pub struct PreFit {
    pub store_ids: Vec<String>,
    pub draws: PosteriorDraws,
}

/// Selection stage and the pre-period chain only (the first step of the
/// pipeline). The chains use the same seeds as [`full_causal_pipeline`].
pub fn fit_pre_period(panel: &TimeSeriesPanel, config: &CausalConfig, seed: u64) -> Result<(SelectionStage, Vec<PreFit>)> {
    let t_pre = check_inputs(panel, config)?;
    let (sel, groups) = prepare(panel, config, t_pre)?;
    let mut fits = Vec::with_capacity(groups.len());
    for (g, (members, a)) in groups.iter().enumerate() {
        let pre = a.resid.columns(0, t_pre).into_owned();
        let gseed = derive_seed(seed, 1000 + g as u64);
        let draws = a.run(&pre, &config.mcmc, derive_seed(gseed, 0), false)?;
        fits.push(PreFit {
            store_ids: members.iter().map(|&i| panel.store_ids[i].clone()).collect(),
            draws,
        });
    }
    Ok((sel, fits))
}

/// Selection on the pre-period, the chain on the pre-period, counterfactual
/// datasets, re-fits of each and of the observed data, and both estimands.
pub fn full_causal_pipeline(panel: &TimeSeriesPanel, config: &CausalConfig, seed: u64) -> Result<CausalReport> {
    let t_pre = check_inputs(panel, config)?;
    let (sel, groups) = prepare(panel, config, t_pre)?;
    let mut stores = Vec::new();
    let mut phi_acceptance = None;
    for (g, (members, analysis)) in groups.iter().enumerate() {
        let res = analyse(analysis, config, derive_seed(seed, 1000 + g as u64))?;
        phi_acceptance = phi_acceptance.or(res.phi_acceptance);
        for (r, &i) in members.iter().enumerate() {
            let off = panel.beta_offset(i);
            let selected_controls = (0..panel.controls[i].nrows())
                .filter(|&c| sel.beta[off + c] != 0.0)
                .map(|c| panel.control_ids[i][c].clone())
                .collect();
            let (ks, threshold) = match &res.ks {
                Some((k, t)) => (k.row(r).iter().copied().collect(), t.row(r).iter().copied().collect()),
                None => (Vec::new(), Vec::new()),
            };
            stores.push(StoreResult {
                store_id: panel.store_ids[i].clone(),
                selected_controls,
                difference: res.difference[r],
                ks,
                threshold,
            });
        }
    }
    Ok(CausalReport {
        timestamps: panel.timestamps[t_pre..].to_vec(),
        time_format: panel.time_format,
        stores,
        dropped: sel.dropped.iter().map(|&i| panel.store_ids[i].clone()).collect(),
        k: if config.difference_only { 0 } else { config.k },
        percentile: config.percentile,
        phi_acceptance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_rule() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(nearest_rank(&v, 0.5), 2.0);
        assert_eq!(nearest_rank(&v, 0.95), 4.0);
        assert_eq!(nearest_rank(&v, 0.0), 1.0);
        assert_eq!(nearest_rank(&[0.2, 0.7], 0.95), 0.7);
    }

    #[test]
    fn ks_examples() {
        assert_eq!(one_sided_ks(&[1.0, 3.0], &[2.0, 4.0]).unwrap(), 0.5);
        assert_eq!(one_sided_ks(&[1.0, 2.0, 3.0], &[11.0, 12.0, 13.0]).unwrap(), 1.0);
        assert_eq!(one_sided_ks(&[11.0, 12.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(one_sided_ks(&[], &[1.0]).is_err());
    }

    #[test]
    fn seeds_differ_by_stream() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_eq!(derive_seed(5, 3), derive_seed(5, 3));
    }
}
