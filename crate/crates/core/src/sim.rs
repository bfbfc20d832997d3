//! Simulated panels: AR(1) trends, sinusoidal seasonality, AR(1) controls,
//! graph-structured observation noise and a logarithmic impact ramp.

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::linalg;
use crate::panel::{TimeFormat, TimeSeriesPanel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_series: usize,
    pub n_controls: usize,
    pub start_date: NaiveDate,
    pub end_date: NaiveDate,
    /// First day of the causal window.
    pub impact_date: NaiveDate,
    pub trend_coef: f64,
    pub trend_sd: f64,
    pub trend_init: f64,
    pub seasonal_amplitude: f64,
    pub seasonal_period: f64,
    pub control_ar: f64,
    pub control_sd: f64,
    /// Coefficients of each series on its controls (same for every series).
    pub beta_true: Vec<f64>,
    pub precision_diag: f64,
    pub precision_off: f64,
    /// Series `i` receives `impact_scales[i] * log(d)` on day `d` of the window.
    pub impact_scales: Vec<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        let n = 5;
        let mut beta = vec![0.0; 10];
        beta[0] = 1.0;
        beta[1] = 2.0;
        SimConfig {
            n_series: n,
            n_controls: 10,
            start_date: NaiveDate::from_ymd_opt(2016, 1, 1).expect("valid date"),
            end_date: NaiveDate::from_ymd_opt(2016, 4, 9).expect("valid date"),
            impact_date: NaiveDate::from_ymd_opt(2016, 3, 21).expect("valid date"),
            trend_coef: 0.8,
            trend_sd: 0.1,
            trend_init: 1.0,
            seasonal_amplitude: 0.1,
            seasonal_period: 7.0,
            control_ar: 0.6,
            control_sd: 1.0,
            beta_true: beta,
            precision_diag: 10.0,
            precision_off: 5.0,
            impact_scales: (0..n).map(|i| i as f64 / 2.0).collect(),
        }
    }
}

impl SimConfig {
    pub fn n_time(&self) -> usize {
        (self.end_date - self.start_date).num_days() as usize + 1
    }

    pub fn causal_start(&self) -> usize {
        (self.impact_date - self.start_date).num_days() as usize
    }

    pub fn horizon(&self) -> usize {
        self.n_time() - self.causal_start()
    }

    pub fn graph(&self) -> Graph {
        Graph::path(self.n_series)
    }

    /// Path-graph precision of the observation noise.
    pub fn precision(&self) -> DMatrix<f64> {
        let n = self.n_series;
        DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                self.precision_diag
            } else if i.abs_diff(j) == 1 {
                self.precision_off
            } else {
                0.0
            }
        })
    }

    pub fn impact(&self, series: usize, day: usize) -> f64 {
        self.impact_scales[series] * (day as f64).ln()
    }

    /// Average injected impact over the causal window.
    pub fn mean_impact(&self, series: usize) -> f64 {
        let p = self.horizon();
        (1..=p).map(|d| self.impact(series, d)).sum::<f64>() / p as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.end_date <= self.start_date
            || self.impact_date <= self.start_date
            || self.impact_date > self.end_date
        {
            return Err(Error::Validation("simulation dates are out of order".into()));
        }
        if self.beta_true.len() != self.n_controls {
            return Err(Error::Validation(format!(
                "beta_true has {} entries for {} controls",
                self.beta_true.len(),
                self.n_controls
            )));
        }
        if self.impact_scales.len() != self.n_series {
            return Err(Error::Validation("one impact scale per series is required".into()));
        }
        if self.n_series == 0 || self.trend_sd < 0.0 || self.control_sd < 0.0 {
            return Err(Error::Validation("invalid simulation constants".into()));
        }
        Ok(())
    }
}

/// Generated components, each `n x T` (controls `n_controls x T`).
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub trend: DMatrix<f64>,
    pub seasonal: DMatrix<f64>,
    pub regression: DMatrix<f64>,
    pub noise: DMatrix<f64>,
    pub impact: DMatrix<f64>,
    pub controls: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPanel {
    pub panel: TimeSeriesPanel,
    pub truth: GroundTruth,
}

pub fn generate_panel(config: &SimConfig, seed: u64) -> Result<SimulatedPanel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.n_series;
    let nt = config.n_time();
    let pc = config.n_controls;
    let t0 = config.causal_start();

    let mut controls = DMatrix::zeros(pc, nt);
    let stationary_sd = config.control_sd / (1.0 - config.control_ar.powi(2)).sqrt();
    for k in 0..pc {
        let mut x = stationary_sd * rng.sample::<f64, _>(StandardNormal);
        for t in 0..nt {
            if t > 0 {
                x = config.control_ar * x + config.control_sd * rng.sample::<f64, _>(StandardNormal);
            }
            controls[(k, t)] = x;
        }
    }

    let mut trend = DMatrix::zeros(n, nt);
    for i in 0..n {
        let mut mu = config.trend_init;
        for t in 0..nt {
            mu = config.trend_coef * mu + config.trend_sd * rng.sample::<f64, _>(StandardNormal);
            trend[(i, t)] = mu;
        }
    }

    let w = 2.0 * std::f64::consts::PI / config.seasonal_period;
    let seasonal = DMatrix::from_fn(n, nt, |_, t| {
        config.seasonal_amplitude * ((w * t as f64).cos() + (w * t as f64).sin())
    });

    let beta = DVector::from_vec(config.beta_true.clone());
    let reg_row = beta.transpose() * &controls;
    let regression = DMatrix::from_fn(n, nt, |_, t| reg_row[t]);

    let cov = linalg::spd_inverse(&config.precision(), "noise precision")?;
    let factor = linalg::cholesky_lower(&cov, "noise covariance")?;
    let mut noise = DMatrix::zeros(n, nt);
    for t in 0..nt {
        let z = linalg::standard_normal_vector(&mut rng, n);
        noise.set_column(t, &(&factor * z));
    }

    let impact = DMatrix::from_fn(n, nt, |i, t| if t >= t0 { config.impact(i, t - t0 + 1) } else { 0.0 });

    let observed = &trend + &seasonal + &regression + &noise + &impact;
    let start_day = config
        .start_date
        .signed_duration_since(NaiveDate::from_ymd_opt(1970, 1, 1).expect("epoch"))
        .num_days();
    let control_ids: Vec<String> = (1..=pc).map(|k| format!("control{k}")).collect();
    let panel = TimeSeriesPanel {
        store_ids: (1..=n).map(|i| format!("dataset{i}")).collect(),
        regions: vec!["sim".to_string(); n],
        timestamps: (0..nt as i64).map(|t| start_day + t).collect(),
        time_format: TimeFormat::Date,
        observed,
        controls: vec![controls.clone(); n],
        control_ids: vec![control_ids; n],
        causal_start: t0,
        graph: config.graph(),
    };
    panel.validate()?;
    Ok(SimulatedPanel {
        panel,
        truth: GroundTruth {
            trend,
            seasonal,
            regression,
            noise,
            impact,
            controls,
        },
    })
}
