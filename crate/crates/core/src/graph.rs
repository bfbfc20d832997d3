//! Undirected graphs over series, with the chordal-graph utilities and the
//! iterative proportional scaling used to fit graph-constrained precisions.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;

/// Symmetric adjacency with an implicit unit diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    adj: Vec<Vec<bool>>,
}

impl Graph {
    /// Builds from a 0/1 matrix; the diagonal must be 1 and the matrix symmetric.
    pub fn from_adjacency(m: &DMatrix<f64>) -> Result<Self> {
        let n = m.nrows();
        if m.ncols() != n {
            return Err(Error::Graph("adjacency must be square".into()));
        }
        let mut adj = vec![vec![false; n]; n];
        for i in 0..n {
            for j in 0..n {
                let v = m[(i, j)];
                if v != 0.0 && v != 1.0 {
                    return Err(Error::Graph(format!("adjacency entry ({i},{j}) = {v} is not binary")));
                }
                if v != m[(j, i)] {
                    return Err(Error::Graph(format!("adjacency is not symmetric at ({i},{j})")));
                }
                adj[i][j] = v == 1.0;
            }
            if !adj[i][i] {
                return Err(Error::Graph(format!("adjacency diagonal at {i} is not 1")));
            }
        }
        Ok(Graph { adj })
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adj = vec![vec![false; n]; n];
        for (i, row) in adj.iter_mut().enumerate() {
            row[i] = true;
        }
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::Graph(format!("edge ({i},{j}) out of range for {n} nodes")));
            }
            adj[i][j] = true;
            adj[j][i] = true;
        }
        Ok(Graph { adj })
    }

    pub fn complete(n: usize) -> Self {
        Graph {
            adj: vec![vec![true; n]; n],
        }
    }

    /// No edges besides the diagonal.
    pub fn empty(n: usize) -> Self {
        Graph::from_edges(n, &[]).expect("no edges")
    }

    /// `i ~ i+1` only.
    pub fn path(n: usize) -> Self {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Graph::from_edges(n, &edges).expect("valid path")
    }

    pub fn n_nodes(&self) -> usize {
        self.adj.len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i][j]
    }

    /// Neighbours of `i`, excluding `i`.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n_nodes()).filter(|&j| j != i && self.adj[i][j]).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.adj.iter().all(|row| row.iter().all(|&b| b))
    }

    pub fn adjacency_matrix(&self) -> DMatrix<f64> {
        let n = self.n_nodes();
        DMatrix::from_fn(n, n, |i, j| if self.adj[i][j] { 1.0 } else { 0.0 })
    }

    pub fn induced_subgraph(&self, keep: &[usize]) -> Graph {
        Graph {
            adj: keep
                .iter()
                .map(|&i| keep.iter().map(|&j| self.adj[i][j]).collect())
                .collect(),
        }
    }

    /// Largest absolute precision entry on a non-edge.
    pub fn max_off_graph(&self, k: &DMatrix<f64>) -> f64 {
        let n = self.n_nodes();
        let mut worst = 0.0_f64;
        for i in 0..n {
            for j in 0..n {
                if !self.adj[i][j] {
                    worst = worst.max(k[(i, j)].abs());
                }
            }
        }
        worst
    }

    /// Maximum cardinality search order, reversed so that every vertex's
    /// later neighbours form a clique when the graph is chordal.
    fn mcs_order(&self) -> Vec<usize> {
        let n = self.n_nodes();
        let mut weight = vec![0usize; n];
        let mut numbered = vec![false; n];
        let mut visit = Vec::with_capacity(n);
        for _ in 0..n {
            let v = (0..n)
                .filter(|&v| !numbered[v])
                .max_by(|&a, &b| weight[a].cmp(&weight[b]).then(b.cmp(&a)))
                .expect("unnumbered vertex");
            numbered[v] = true;
            visit.push(v);
            for u in self.neighbors(v) {
                if !numbered[u] {
                    weight[u] += 1;
                }
            }
        }
        visit.reverse();
        visit
    }

    /// Perfect elimination order if the graph is chordal.
    pub fn perfect_elimination_order(&self) -> Option<Vec<usize>> {
        let order = self.mcs_order();
        let n = self.n_nodes();
        let mut pos = vec![0; n];
        for (k, &v) in order.iter().enumerate() {
            pos[v] = k;
        }
        for &v in &order {
            let later: Vec<usize> = self.neighbors(v).into_iter().filter(|&u| pos[u] > pos[v]).collect();
            for (a, &x) in later.iter().enumerate() {
                for &y in &later[a + 1..] {
                    if !self.adj[x][y] {
                        return None;
                    }
                }
            }
        }
        Some(order)
    }

    pub fn is_decomposable(&self) -> bool {
        self.perfect_elimination_order().is_some()
    }

    /// Maximal cliques (Bron-Kerbosch with pivoting), each sorted.
    pub fn maximal_cliques(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let all: Vec<usize> = (0..self.n_nodes()).collect();
        self.bron_kerbosch(Vec::new(), all, Vec::new(), &mut out);
        for c in &mut out {
            c.sort_unstable();
        }
        out.sort();
        out
    }

    fn bron_kerbosch(&self, r: Vec<usize>, mut p: Vec<usize>, mut x: Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if p.is_empty() && x.is_empty() {
            out.push(r);
            return;
        }
        let pivot = p
            .iter()
            .chain(x.iter())
            .copied()
            .max_by_key(|&u| p.iter().filter(|&&v| v != u && self.adj[u][v]).count())
            .expect("non-empty candidate set");
        let candidates: Vec<usize> = p
            .iter()
            .copied()
            .filter(|&v| v == pivot || !self.adj[pivot][v])
            .collect();
        for v in candidates {
            let nbr = |w: &usize| *w != v && self.adj[v][*w];
            let mut r2 = r.clone();
            r2.push(v);
            let p2 = p.iter().copied().filter(|w| nbr(w)).collect();
            let x2 = x.iter().copied().filter(|w| nbr(w)).collect();
            self.bron_kerbosch(r2, p2, x2, out);
            p.retain(|&w| w != v);
            x.push(v);
        }
    }
}

/// Precision `K` with zeros on the non-edges whose inverse matches `cov` on
/// every clique block: the graph-constrained Gaussian maximum-likelihood
/// precision for the sample covariance `cov`.
pub fn ips_precision(graph: &Graph, cov: &DMatrix<f64>, tol: f64, max_sweeps: usize) -> Result<DMatrix<f64>> {
    let n = graph.n_nodes();
    if cov.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "covariance is {:?}, graph has {n} nodes",
            cov.shape()
        )));
    }
    if graph.is_complete() {
        return linalg::spd_inverse(cov, "scatter for graph projection");
    }
    let cliques = graph.maximal_cliques();
    let mut k = DMatrix::from_diagonal(&cov.diagonal().map(|v| 1.0 / v));
    if cov.diagonal().iter().any(|&v| v <= 0.0) {
        return Err(Error::NotPositiveDefinite("scatter has a non-positive diagonal".into()));
    }
    for _ in 0..max_sweeps {
        for c in &cliques {
            let rest: Vec<usize> = (0..n).filter(|i| !c.contains(i)).collect();
            let s_cc = cov.select_rows(c.iter()).select_columns(c.iter());
            let s_inv = linalg::spd_inverse(&s_cc, "clique scatter")?;
            let block = if rest.is_empty() {
                s_inv
            } else {
                let k_cr = k.select_rows(c.iter()).select_columns(rest.iter());
                let k_rr = k.select_rows(rest.iter()).select_columns(rest.iter());
                let k_rr_inv = linalg::spd_inverse(&k_rr, "precision block")?;
                s_inv + &k_cr * k_rr_inv * k_cr.transpose()
            };
            for (a, &i) in c.iter().enumerate() {
                for (b, &j) in c.iter().enumerate() {
                    k[(i, j)] = block[(a, b)];
                }
            }
        }
        linalg::symmetrize(&mut k);
        let w = linalg::spd_inverse(&k, "fitted precision")?;
        let mut gap = 0.0_f64;
        for c in &cliques {
            for &i in c {
                for &j in c {
                    gap = gap.max((w[(i, j)] - cov[(i, j)]).abs());
                }
            }
        }
        if gap < tol * cov.amax().max(1.0) {
            break;
        }
    }
    Ok(k)
}
