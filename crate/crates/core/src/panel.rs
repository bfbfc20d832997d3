//! Panel of test series with their control regressors.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::graph::Graph;

/// How timestamps are written back out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TimeFormat {
    #[default]
    Integer,
    /// Days since 1970-01-01, printed as `YYYY-MM-DD`.
    Date,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesPanel {
    pub store_ids: Vec<String>,
    pub regions: Vec<String>,
    pub timestamps: Vec<i64>,
    pub time_format: TimeFormat,
    /// `n x T`; `NaN` marks a missing value.
    pub observed: DMatrix<f64>,
    /// Per test series, `p_i x T` control values.
    pub controls: Vec<DMatrix<f64>>,
    pub control_ids: Vec<Vec<String>>,
    /// Index of the first time point of the causal window.
    pub causal_start: usize,
    pub graph: Graph,
}

impl TimeSeriesPanel {
    pub fn n_series(&self) -> usize {
        self.observed.nrows()
    }

    pub fn n_time(&self) -> usize {
        self.observed.ncols()
    }

    /// Length of the causal window.
    pub fn horizon(&self) -> usize {
        self.n_time() - self.causal_start
    }

    pub fn control_counts(&self) -> Vec<usize> {
        self.controls.iter().map(|c| c.nrows()).collect()
    }

    pub fn n_controls(&self) -> usize {
        self.controls.iter().map(|c| c.nrows()).sum()
    }

    /// Offset of series `i`'s coefficients inside the stacked `beta`.
    pub fn beta_offset(&self, i: usize) -> usize {
        self.controls[..i].iter().map(|c| c.nrows()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_series();
        let t = self.n_time();
        if self.store_ids.len() != n || self.regions.len() != n {
            return Err(Error::Validation("store labels do not match the series count".into()));
        }
        if self.timestamps.len() != t {
            return Err(Error::Validation("timestamps do not match the series length".into()));
        }
        if self.controls.len() != n || self.control_ids.len() != n {
            return Err(Error::Validation("one control block per series is required".into()));
        }
        for (i, c) in self.controls.iter().enumerate() {
            if c.ncols() != t || self.control_ids[i].len() != c.nrows() {
                return Err(Error::Validation(format!(
                    "control block of {} has shape {:?}",
                    self.store_ids[i],
                    c.shape()
                )));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "control values for {} must be complete",
                    self.store_ids[i]
                )));
            }
        }
        if self.graph.n_nodes() != n {
            return Err(Error::Validation("graph does not match the series count".into()));
        }
        if t >= 2 {
            let step = self.timestamps[1] - self.timestamps[0];
            if step <= 0 {
                return Err(Error::Validation("timestamps must be strictly increasing".into()));
            }
            for w in 1..t {
                if self.timestamps[w] - self.timestamps[w - 1] != step {
                    return Err(Error::Validation(format!(
                        "non-uniform timestamps: gap between {} and {}",
                        self.timestamps[w - 1],
                        self.timestamps[w]
                    )));
                }
            }
        }
        if self.causal_start == 0 || self.causal_start >= t {
            return Err(Error::Validation(format!(
                "causal start {} must lie strictly inside 0..{t}",
                self.causal_start
            )));
        }
        Ok(())
    }

    /// `X_t` for time `t`, the `n x p` block-diagonal design.
    pub fn design_at(&self, t: usize) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(self.n_series(), self.n_controls());
        for (i, c) in self.controls.iter().enumerate() {
            let off = self.beta_offset(i);
            for k in 0..c.nrows() {
                x[(i, off + k)] = c[(k, t)];
            }
        }
        x
    }

    /// `X_t beta` for every `t`, as `n x T`.
    pub fn regression_effect(&self, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        if beta.len() != self.n_controls() {
            return Err(Error::Dimension(format!(
                "beta has length {}, panel has {} controls",
                beta.len(),
                self.n_controls()
            )));
        }
        let mut out = DMatrix::zeros(self.n_series(), self.n_time());
        for (i, c) in self.controls.iter().enumerate() {
            let b = beta.rows(self.beta_offset(i), c.nrows());
            let row = b.transpose() * c;
            out.row_mut(i).copy_from(&row);
        }
        Ok(out)
    }

    /// First `end` time points; the causal start is clamped to `end`.
    pub fn truncated(&self, end: usize) -> TimeSeriesPanel {
        let end = end.min(self.n_time());
        TimeSeriesPanel {
            store_ids: self.store_ids.clone(),
            regions: self.regions.clone(),
            timestamps: self.timestamps[..end].to_vec(),
            time_format: self.time_format,
            observed: self.observed.columns(0, end).into_owned(),
            controls: self.controls.iter().map(|c| c.columns(0, end).into_owned()).collect(),
            control_ids: self.control_ids.clone(),
            causal_start: self.causal_start.min(end),
            graph: self.graph.clone(),
        }
    }

    /// Pre-period panel (time points before the causal window).
    pub fn pre_period(&self) -> TimeSeriesPanel {
        self.truncated(self.causal_start)
    }

    /// Keeps the listed series, with the induced subgraph.
    pub fn select_series(&self, keep: &[usize]) -> TimeSeriesPanel {
        TimeSeriesPanel {
            store_ids: keep.iter().map(|&i| self.store_ids[i].clone()).collect(),
            regions: keep.iter().map(|&i| self.regions[i].clone()).collect(),
            timestamps: self.timestamps.clone(),
            time_format: self.time_format,
            observed: self.observed.select_rows(keep.iter()),
            controls: keep.iter().map(|&i| self.controls[i].clone()).collect(),
            control_ids: keep.iter().map(|&i| self.control_ids[i].clone()).collect(),
            causal_start: self.causal_start,
            graph: self.graph.induced_subgraph(keep),
        }
    }

    /// Keeps, per series, only the listed control rows.
    pub fn select_controls(&self, keep: &[Vec<usize>]) -> TimeSeriesPanel {
        let mut out = self.clone();
        for (i, rows) in keep.iter().enumerate() {
            out.controls[i] = self.controls[i].select_rows(rows.iter());
            out.control_ids[i] = rows.iter().map(|&k| self.control_ids[i][k].clone()).collect();
        }
        out
    }

    /// Same panel with different observed values.
    pub fn with_observed(&self, observed: DMatrix<f64>) -> TimeSeriesPanel {
        let mut out = self.clone();
        out.observed = observed;
        out
    }
}

/// `Y_t - X_t beta`; missing entries stay missing.
pub fn apply_regression(panel: &TimeSeriesPanel, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
    let effect = panel.regression_effect(beta)?;
    Ok(&panel.observed - effect)
}
