//! Exact Kriging solves, the Vecchia log-likelihood and sequential field simulation.
//!
//! All Kriging quantities live on the correlation scale `r K + (1 - r) I`; the
//! marginal variance enters only through [`conditional_logpdf`].

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::{corr_matrix, CovarianceParams, FullParams, Matern};
use crate::rng::rng_from_seed;
use crate::spatial::{dist, OrderedNeighborGraph, Point};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Conditioning-set size used when simulating fields.
pub const SIMULATION_M: usize = 80;

/// Kriging weights and log conditional variance of one site given its conditioning set.
#[derive(Debug, Clone, PartialEq)]
pub struct KrigingSolution {
    pub weights: Vec<f64>,
    pub log_variance: f64,
}

impl KrigingSolution {
    /// Unconditional distribution: no weights, unit variance.
    pub fn unconditional() -> Self {
        Self {
            weights: Vec::new(),
            log_variance: 0.0,
        }
    }

    pub fn variance(&self) -> f64 {
        self.log_variance.exp()
    }
}

/// Exact weights `Sigma_{i(i)} Sigma_{(i)(i)}^{-1}` and `log(1 - Sigma_{i(i)} Sigma_{(i)(i)}^{-1} Sigma_{i(i)}^T)`.
pub fn exact_kriging(
    site: &Point,
    neighbors: &[Point],
    theta: &CovarianceParams,
) -> Result<KrigingSolution> {
    theta.validate()?;
    let kern = Matern::new(theta.phi, theta.nu)?;
    exact_kriging_with(&kern, theta.r, site, neighbors)
}

/// [`exact_kriging`] with a prepared kernel.
pub fn exact_kriging_with(
    kern: &Matern,
    r: f64,
    site: &Point,
    neighbors: &[Point],
) -> Result<KrigingSolution> {
    let m = neighbors.len();
    if m == 0 {
        return Ok(KrigingSolution::unconditional());
    }
    let mut cov = DMatrix::<f64>::identity(m, m);
    let mut cross = DVector::<f64>::zeros(m);
    for j in 0..m {
        cross[j] = r * kern.corr(dist(site, &neighbors[j]));
        for k in 0..j {
            let v = r * kern.corr(dist(&neighbors[j], &neighbors[k]));
            cov[(j, k)] = v;
            cov[(k, j)] = v;
        }
    }
    solve_correlation_system(cov, cross)
}

/// Weights and log-variance from the neighbor correlation matrix and the
/// site-neighbor correlation vector.
fn solve_correlation_system(cov: DMatrix<f64>, cross: DVector<f64>) -> Result<KrigingSolution> {
    let m = cross.len();
    let chol = cov.cholesky().ok_or_else(|| Error::NotPositiveDefinite {
        context: format!("neighbor correlation matrix of size {m}"),
    })?;
    // var = 1 - c^T C^{-1} c = 1 - |L^{-1} c|^2
    let half = chol.l_dirty().solve_lower_triangular(&cross).ok_or_else(|| {
        Error::NotPositiveDefinite {
            context: "triangular solve".into(),
        }
    })?;
    let var = 1.0 - half.norm_squared();
    if !(var > 0.0) {
        return Err(Error::NotPositiveDefinite {
            context: format!("conditional variance {var} is not positive"),
        });
    }
    let weights = chol.solve(&cross);
    Ok(KrigingSolution {
        weights: weights.iter().copied().collect(),
        log_variance: var.ln().min(0.0),
    })
}

/// Log-density of `z` under `Normal(mu + sum_j w_j (z_j - mu), sigma2 exp(w_0))`.
pub fn conditional_logpdf(
    z: f64,
    z_neighbors: &[f64],
    sol: &KrigingSolution,
    mu: f64,
    sigma2: f64,
) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma2 must be > 0, got {sigma2}")));
    }
    if z_neighbors.len() != sol.weights.len() {
        return Err(Error::DimensionMismatch {
            expected: sol.weights.len(),
            got: z_neighbors.len(),
        });
    }
    Ok(logpdf_unchecked(z, z_neighbors.iter().copied(), sol, mu, sigma2))
}

#[inline]
fn logpdf_unchecked(
    z: f64,
    z_neighbors: impl Iterator<Item = f64>,
    sol: &KrigingSolution,
    mu: f64,
    sigma2: f64,
) -> f64 {
    let mean = mu
        + sol
            .weights
            .iter()
            .zip(z_neighbors)
            .map(|(w, zj)| w * (zj - mu))
            .sum::<f64>();
    let var = sigma2 * sol.log_variance.exp();
    let e = z - mean;
    -0.5 * (LN_2PI + var.ln() + e * e / var)
}

/// Source of Kriging solutions for every ordered position of a graph.
pub trait KrigingProvider: Sync {
    /// One solution per ordered position of `graph`, for the site coordinates `points`
    /// (indexed by original site index).
    fn solve_graph(
        &self,
        points: &[Point],
        graph: &OrderedNeighborGraph,
        theta: &CovarianceParams,
    ) -> Result<Vec<KrigingSolution>>;

    fn name(&self) -> &'static str;

    /// Network bin used for proportion `r`, for providers that have bins.
    fn bin_for(&self, _r: f64) -> Option<usize> {
        None
    }
}

/// Cholesky solve at every site.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactProvider;

impl KrigingProvider for ExactProvider {
    fn solve_graph(
        &self,
        points: &[Point],
        graph: &OrderedNeighborGraph,
        theta: &CovarianceParams,
    ) -> Result<Vec<KrigingSolution>> {
        theta.validate()?;
        let kern = Matern::new(theta.phi, theta.nu)?;
        (0..graph.len())
            .into_par_iter()
            .map(|pos| {
                let (site, nbrs) = graph.site_and_neighbors(points, pos);
                exact_kriging_with(&kern, theta.r, &site, &nbrs)
            })
            .collect()
    }

    fn name(&self) -> &'static str {
        "exact"
    }
}

/// Exact solves for one fixed geometry.
///
/// Distances that occur in any conditioning system are deduplicated once, so an
/// evaluation costs one Matérn call per distinct pair. Kernel values for the two
/// most recent `(phi, nu)` pairs are kept, so evaluations that only change `r`
/// skip the kernel entirely, also right after a rejected proposal. Calls with a different point set or graph fall back
/// to [`ExactProvider`].
pub struct CachedExactProvider {
    points_ptr: usize,
    order_ptr: usize,
    len: usize,
    distances: Vec<f64>,
    /// Per ordered position: indices into `distances`, the `m` site-neighbor
    /// entries first, then the strict lower triangle row by row.
    pair_index: Vec<Vec<u32>>,
    recent: std::sync::Mutex<Vec<(f64, f64, std::sync::Arc<Vec<f64>>)>>,
}

impl CachedExactProvider {
    pub fn new(points: &[Point], graph: &OrderedNeighborGraph) -> Self {
        use std::collections::HashMap;
        let order = graph.order();
        let mut lookup: HashMap<(u32, u32), u32> = HashMap::new();
        let mut distances = Vec::new();
        let mut key_of = |a: usize, b: usize, distances: &mut Vec<f64>| -> u32 {
            let key = (a.min(b) as u32, a.max(b) as u32);
            *lookup.entry(key).or_insert_with(|| {
                distances.push(dist(&points[a], &points[b]));
                (distances.len() - 1) as u32
            })
        };
        let pair_index = (0..graph.len())
            .map(|pos| {
                let site = order[pos];
                let nb: Vec<usize> = graph.neighbors(pos).iter().map(|&q| order[q]).collect();
                let mut idx = Vec::with_capacity(nb.len() * (nb.len() + 1) / 2);
                for &j in &nb {
                    idx.push(key_of(site, j, &mut distances));
                }
                for a in 0..nb.len() {
                    for b in 0..a {
                        idx.push(key_of(nb[a], nb[b], &mut distances));
                    }
                }
                idx
            })
            .collect();
        Self {
            points_ptr: points.as_ptr() as usize,
            order_ptr: order.as_ptr() as usize,
            len: graph.len(),
            distances,
            pair_index,
            recent: std::sync::Mutex::new(Vec::with_capacity(2)),
        }
    }

    /// Number of distinct distances in the geometry.
    pub fn distinct_pairs(&self) -> usize {
        self.distances.len()
    }

    fn kernel_values(&self, theta: &CovarianceParams) -> Result<std::sync::Arc<Vec<f64>>> {
        let mut recent = self.recent.lock().expect("kernel cache poisoned");
        if let Some(k) = recent.iter().position(|(phi, nu, _)| *phi == theta.phi && *nu == theta.nu) {
            let hit = recent.remove(k);
            let vals = hit.2.clone();
            recent.insert(0, hit);
            return Ok(vals);
        }
        let kern = Matern::new(theta.phi, theta.nu)?;
        let vals: Vec<f64> = self.distances.par_iter().map(|&d| kern.corr(d)).collect();
        let vals = std::sync::Arc::new(vals);
        recent.insert(0, (theta.phi, theta.nu, vals.clone()));
        recent.truncate(2);
        Ok(vals)
    }
}

impl KrigingProvider for CachedExactProvider {
    fn solve_graph(
        &self,
        points: &[Point],
        graph: &OrderedNeighborGraph,
        theta: &CovarianceParams,
    ) -> Result<Vec<KrigingSolution>> {
        if points.as_ptr() as usize != self.points_ptr
            || graph.order().as_ptr() as usize != self.order_ptr
            || graph.len() != self.len
        {
            return ExactProvider.solve_graph(points, graph, theta);
        }
        theta.validate()?;
        let kvals = self.kernel_values(theta)?;
        let r = theta.r;
        self.pair_index
            .par_iter()
            .map(|idx| {
                let m = graph_m_from_pairs(idx.len());
                if m == 0 {
                    return Ok(KrigingSolution::unconditional());
                }
                let cross = DVector::from_iterator(m, idx[..m].iter().map(|&u| r * kvals[u as usize]));
                let mut cov = DMatrix::<f64>::identity(m, m);
                let mut it = idx[m..].iter();
                for a in 0..m {
                    for b in 0..a {
                        let v = r * kvals[*it.next().expect("pair index") as usize];
                        cov[(a, b)] = v;
                        cov[(b, a)] = v;
                    }
                }
                solve_correlation_system(cov, cross)
            })
            .collect()
    }

    fn name(&self) -> &'static str {
        "exact-cached"
    }
}

/// Inverse of `m (m + 1) / 2`.
fn graph_m_from_pairs(len: usize) -> usize {
    let m = (((8 * len + 1) as f64).sqrt() as usize).saturating_sub(1) / 2;
    debug_assert_eq!(m * (m + 1) / 2, len);
    m
}

/// Pairwise (cascade) summation; the result does not depend on how the terms were produced.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 64;
    if values.len() <= LEAF {
        values.iter().sum()
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}

/// Per-position conditional log-densities; `data` is indexed by original site index.
pub fn loglik_terms(
    data: &[f64],
    graph: &OrderedNeighborGraph,
    solutions: &[KrigingSolution],
    mu: f64,
    sigma2: f64,
) -> Result<Vec<f64>> {
    if data.len() != graph.len() {
        return Err(Error::DimensionMismatch {
            expected: graph.len(),
            got: data.len(),
        });
    }
    if solutions.len() != graph.len() {
        return Err(Error::DimensionMismatch {
            expected: graph.len(),
            got: solutions.len(),
        });
    }
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma2 must be > 0, got {sigma2}")));
    }
    let order = graph.order();
    Ok((0..graph.len())
        .map(|pos| {
            let nb = graph.neighbors(pos);
            logpdf_unchecked(
                data[order[pos]],
                nb.iter().map(|&q| data[order[q]]),
                &solutions[pos],
                mu,
                sigma2,
            )
        })
        .collect())
}

/// Vecchia log-likelihood `sum_i log f(Z_i | Z_(i))` over the max-min ordering.
pub fn vecchia_loglik(
    data: &[f64],
    points: &[Point],
    graph: &OrderedNeighborGraph,
    provider: &dyn KrigingProvider,
    params: &FullParams,
) -> Result<f64> {
    params.validate()?;
    if points.len() != graph.len() {
        return Err(Error::DimensionMismatch {
            expected: graph.len(),
            got: points.len(),
        });
    }
    let solutions = provider.solve_graph(points, graph, &params.theta)?;
    let terms = loglik_terms(data, graph, &solutions, params.mu, params.sigma2)?;
    Ok(pairwise_sum(&terms))
}

/// Sequential draw `Z_i ~ Normal(mu + sum w (Z_j - mu), sigma2 exp(w_0))` in max-min
/// order using exact weights. Returns values indexed by original site index.
pub fn simulate_field(
    points: &[Point],
    graph: &OrderedNeighborGraph,
    params: &FullParams,
    seed: u64,
) -> Result<Vec<f64>> {
    params.validate()?;
    let solutions = ExactProvider.solve_graph(points, graph, &params.theta)?;
    let mut rng = rng_from_seed(seed);
    let order = graph.order();
    let mut z = vec![0.0; graph.len()];
    let sd = params.sigma2.sqrt();
    for pos in 0..graph.len() {
        let sol = &solutions[pos];
        let mean = params.mu
            + graph
                .neighbors(pos)
                .iter()
                .zip(&sol.weights)
                .map(|(&q, w)| w * (z[order[q]] - params.mu))
                .sum::<f64>();
        let eps: f64 = StandardNormal.sample(&mut rng);
        z[order[pos]] = mean + sd * (0.5 * sol.log_variance).exp() * eps;
    }
    Ok(z)
}

/// Full multivariate-normal log-likelihood from a dense Cholesky factor.
pub fn dense_loglik(data: &[f64], points: &[Point], params: &FullParams) -> Result<f64> {
    params.validate()?;
    let n = points.len();
    if data.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: data.len(),
        });
    }
    let c = corr_matrix(points, &params.theta)? * params.sigma2;
    let chol = c.cholesky().ok_or_else(|| Error::NotPositiveDefinite {
        context: format!("dense covariance of size {n}"),
    })?;
    let resid = DVector::from_iterator(n, data.iter().map(|z| z - params.mu));
    let half = chol
        .l_dirty()
        .solve_lower_triangular(&resid)
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(-0.5 * (n as f64 * LN_2PI + log_det + half.norm_squared()))
}
