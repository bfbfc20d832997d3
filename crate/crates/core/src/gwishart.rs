//! G-Wishart sampling.
//!
//! Convention: `W_G(b, D)` has density proportional to
//! `|K|^{(b-2)/2} exp(-tr(D K)/2)` on precisions `K` with zeros on the
//! non-edges of `G`. For the complete graph this is the Wishart law with
//! `b + n - 1` degrees of freedom and scale matrix `D^{-1}`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::linalg;

const COMPLETION_TOL: f64 = 1e-12;
const COMPLETION_MAX_SWEEPS: usize = 1000;

/// Prior `W_G(df, multiplier * scale)` on a precision matrix.
#[derive(Debug, Clone)]
pub struct GWishartPrior {
    pub df: f64,
    pub scale: DMatrix<f64>,
    pub graph: Graph,
    pub scale_multiplier: f64,
}

impl GWishartPrior {
    pub fn new(df: f64, scale: DMatrix<f64>, graph: Graph, scale_multiplier: f64) -> Result<Self> {
        if df <= 0.0 || scale_multiplier <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "G-Wishart df {df} and multiplier {scale_multiplier} must be positive"
            )));
        }
        if scale.shape() != (graph.n_nodes(), graph.n_nodes()) {
            return Err(Error::Dimension("G-Wishart scale does not match graph".into()));
        }
        linalg::cholesky_lower(&scale, "G-Wishart scale")?;
        Ok(GWishartPrior {
            df,
            scale,
            graph,
            scale_multiplier,
        })
    }

    pub fn rate_matrix(&self) -> DMatrix<f64> {
        &self.scale * self.scale_multiplier
    }

    /// Conjugate update with `count` Gaussian observations and scatter `S`.
    pub fn posterior(&self, count: f64, scatter: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        let mut rate = self.rate_matrix() + scatter;
        linalg::symmetrize(&mut rate);
        (self.df + count, rate)
    }

    /// Unnormalized log density at a graph-feasible precision `k`.
    pub fn log_density_unnormalized(&self, k: &DMatrix<f64>) -> Result<f64> {
        let log_det = linalg::log_det_spd(k, "precision")?;
        Ok(0.5 * (self.df - 2.0) * log_det - 0.5 * (self.rate_matrix().component_mul(k)).sum())
    }
}

/// What to do when the graph is not chordal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonDecomposable {
    Reject,
    Complete,
}

/// One draw from `W_G(df, rate)`.
pub fn sample_gwishart<R: Rng + ?Sized>(
    df: f64,
    rate: &DMatrix<f64>,
    graph: &Graph,
    fallback: NonDecomposable,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let n = graph.n_nodes();
    if rate.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "rate matrix {:?} for a {n}-node graph",
            rate.shape()
        )));
    }
    if df <= 0.0 {
        return Err(Error::InvalidArgument(format!("G-Wishart df must be positive, got {df}")));
    }
    match graph.perfect_elimination_order() {
        Some(order) => sample_decomposable(df, rate, graph, &order, rng),
        None => match fallback {
            NonDecomposable::Complete => sample_by_completion(df, rate, graph, rng),
            NonDecomposable::Reject => Err(Error::Graph(
                "graph is not decomposable and the completion sampler is disabled".into(),
            )),
        },
    }
}

/// Exact sampler for chordal graphs. With `pa(j)` the neighbours of `j` later
/// in a perfect elimination order, `K = (I - B)' diag(lambda) (I - B)` where
/// row `j` of `B` holds regression coefficients on `pa(j)`;
/// `lambda_j ~ Gamma((b + |pa|)/2, rate d_{j.pa}/2)` and
/// `beta_j | lambda_j ~ N(D_pa^{-1} D_{pa,j}, D_pa^{-1} / lambda_j)`.
pub fn sample_decomposable<R: Rng + ?Sized>(
    df: f64,
    rate: &DMatrix<f64>,
    graph: &Graph,
    order: &[usize],
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let n = graph.n_nodes();
    let mut pos = vec![0; n];
    for (k, &v) in order.iter().enumerate() {
        pos[v] = k;
    }
    let mut ib = DMatrix::identity(n, n);
    let mut lambda = DVector::zeros(n);
    for &j in order {
        let pa: Vec<usize> = graph.neighbors(j).into_iter().filter(|&u| pos[u] > pos[j]).collect();
        let (cond_rate, mean, factor) = if pa.is_empty() {
            (rate[(j, j)], DVector::zeros(0), DMatrix::zeros(0, 0))
        } else {
            let d_pa = rate.select_rows(pa.iter()).select_columns(pa.iter());
            let d_pj = DVector::from_iterator(pa.len(), pa.iter().map(|&u| rate[(u, j)]));
            let d_pa_inv = linalg::spd_inverse(&d_pa, "G-Wishart rate block")?;
            let mean = &d_pa_inv * &d_pj;
            let cond = rate[(j, j)] - d_pj.dot(&mean);
            (cond, mean, linalg::cholesky_lower(&d_pa_inv, "G-Wishart rate block")?)
        };
        if cond_rate <= 0.0 {
            return Err(Error::NotPositiveDefinite("G-Wishart rate matrix".into()));
        }
        let shape = 0.5 * (df + pa.len() as f64);
        let lam = Gamma::new(shape, 2.0 / cond_rate)
            .map_err(|e| Error::InvalidArgument(format!("gamma draw: {e}")))?
            .sample(rng);
        lambda[j] = lam;
        if !pa.is_empty() {
            let z = linalg::standard_normal_vector(rng, pa.len());
            let beta = mean + factor * z / lam.sqrt();
            for (a, &u) in pa.iter().enumerate() {
                ib[(j, u)] = -beta[a];
            }
        }
    }
    let mut k = ib.transpose() * DMatrix::from_diagonal(&lambda) * ib;
    linalg::symmetrize(&mut k);
    zero_non_edges(&mut k, graph);
    Ok(k)
}

/// `log` of the normalizing constant of `W_G(df, rate)`, up to a term that
/// depends only on `df` and the graph. `None` when the graph is not chordal.
///
/// Integrating the decomposable construction vertex by vertex gives
/// `sum_j [-(df + |pa_j|)/2 log d_{j.pa} - 1/2 log |D_pa|]`.
pub fn log_normalizer_rate_part(df: f64, rate: &DMatrix<f64>, graph: &Graph) -> Result<Option<f64>> {
    let Some(order) = graph.perfect_elimination_order() else {
        return Ok(None);
    };
    let n = graph.n_nodes();
    let mut pos = vec![0; n];
    for (k, &v) in order.iter().enumerate() {
        pos[v] = k;
    }
    let mut total = 0.0;
    for &j in &order {
        let pa: Vec<usize> = graph.neighbors(j).into_iter().filter(|&u| pos[u] > pos[j]).collect();
        let mut cond = rate[(j, j)];
        if !pa.is_empty() {
            let d_pa = rate.select_rows(pa.iter()).select_columns(pa.iter());
            let d_pj = DVector::from_iterator(pa.len(), pa.iter().map(|&u| rate[(u, j)]));
            let chol = nalgebra::Cholesky::new(d_pa)
                .ok_or_else(|| Error::NotPositiveDefinite("G-Wishart rate block".into()))?;
            cond -= d_pj.dot(&chol.solve(&d_pj));
            total -= chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        }
        if cond <= 0.0 {
            return Err(Error::NotPositiveDefinite("G-Wishart rate matrix".into()));
        }
        total -= 0.5 * (df + pa.len() as f64) * cond.ln();
    }
    Ok(Some(total))
}

/// Bartlett draw from the complete-graph law `W_G(df, rate)`.
pub fn sample_wishart<R: Rng + ?Sized>(df: f64, rate: &DMatrix<f64>, rng: &mut R) -> Result<DMatrix<f64>> {
    let n = rate.nrows();
    let total_df = df + n as f64 - 1.0;
    let scale = linalg::spd_inverse(rate, "Wishart rate")?;
    let l = linalg::cholesky_lower(&scale, "Wishart scale")?;
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        let chi = ChiSquared::new(total_df - i as f64)
            .map_err(|e| Error::InvalidArgument(format!("chi-squared draw: {e}")))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let la = l * a;
    let mut k = &la * la.transpose();
    linalg::symmetrize(&mut k);
    Ok(k)
}

/// Direct sampler for general graphs: draw from the complete-graph law, then
/// complete its covariance so that the precision vanishes on non-edges.
pub fn sample_by_completion<R: Rng + ?Sized>(
    df: f64,
    rate: &DMatrix<f64>,
    graph: &Graph,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let n = graph.n_nodes();
    let full = sample_wishart(df, rate, rng)?;
    let sigma = linalg::spd_inverse(&full, "Wishart draw")?;
    let mut w = sigma.clone();
    for _ in 0..COMPLETION_MAX_SWEEPS {
        let prev = w.clone();
        for j in 0..n {
            let nb = graph.neighbors(j);
            let others: Vec<usize> = (0..n).filter(|&i| i != j).collect();
            let mut beta = DVector::zeros(n);
            if !nb.is_empty() {
                let w_nn = w.select_rows(nb.iter()).select_columns(nb.iter());
                let s_nj = DVector::from_iterator(nb.len(), nb.iter().map(|&i| sigma[(i, j)]));
                let b = linalg::spd_inverse(&w_nn, "completion block")? * s_nj;
                for (a, &i) in nb.iter().enumerate() {
                    beta[i] = b[a];
                }
            }
            for &i in &others {
                let v: f64 = others.iter().map(|&l| w[(i, l)] * beta[l]).sum();
                w[(i, j)] = v;
                w[(j, i)] = v;
            }
        }
        if (&w - &prev).amax() < COMPLETION_TOL * w.amax().max(1.0) {
            break;
        }
    }
    let mut k = linalg::spd_inverse(&w, "completed covariance")?;
    zero_non_edges(&mut k, graph);
    Ok(k)
}

fn zero_non_edges(k: &mut DMatrix<f64>, graph: &Graph) {
    let n = graph.n_nodes();
    for i in 0..n {
        for j in 0..n {
            if !graph.has_edge(i, j) {
                k[(i, j)] = 0.0;
            }
        }
    }
}
