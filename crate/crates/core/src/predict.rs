//! Kriging at unobserved sites, from one parameter value or from thinned chain draws.
//!
//! Each test site conditions on its `m` nearest training sites; test sites are
//! independent of one another given the training data.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::Chain;
use crate::kernel::{CovarianceParams, Matern, ZERO_LAG};
use crate::spatial::{dist, NeighborIndex, Point};
use crate::surrogate::{surrogate_kriging, SurrogateBank};
use crate::vecchia::{exact_kriging_with, KrigingSolution};

/// 97.5% standard normal quantile.
const Z975: f64 = 1.959_963_984_540_054;

/// Observed data at the training sites.
#[derive(Debug, Clone, Copy)]
pub struct Observed<'a> {
    pub points: &'a [Point],
    pub data: &'a [f64],
}

/// Linear trend `X beta` for the hierarchical mode.
#[derive(Debug, Clone, Copy)]
pub struct Trend<'a> {
    pub train: &'a DMatrix<f64>,
    pub test: &'a DMatrix<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Test sites that coincide with a training site.
    pub duplicate: Vec<bool>,
    /// Per-draw means in the Bayesian mode, one vector per retained draw.
    pub draw_means: Option<Vec<Vec<f64>>>,
    pub stride: Option<usize>,
}

impl PredictionResult {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Mean squared error against held-out values.
    pub fn mse(&self, truth: &[f64]) -> Result<f64> {
        if truth.len() != self.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), got: truth.len() });
        }
        if truth.is_empty() {
            return Err(Error::InvalidArgument("no test sites".into()));
        }
        Ok(self.mean.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / truth.len() as f64)
    }

    /// Normal-approximation interval `mean -/+ 1.96 sd`.
    pub fn interval(&self, i: usize) -> (f64, f64) {
        let half = Z975 * self.variance[i].sqrt();
        (self.mean[i] - half, self.mean[i] + half)
    }

    /// Columns `x,y,mean,variance`, plus `q025,q975` in the Bayesian mode. `points`
    /// are written as given.
    pub fn write_csv<W: Write>(&self, points: &[Point], out: W) -> Result<()> {
        if points.len() != self.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), got: points.len() });
        }
        let bayes = self.draw_means.is_some();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["x", "y", "mean", "variance"];
        if bayes {
            header.extend(["q025", "q975"]);
        }
        w.write_record(&header).map_err(csv_err)?;
        for (i, p) in points.iter().enumerate() {
            let mut rec = vec![p[0].to_string(), p[1].to_string(), self.mean[i].to_string(), self.variance[i].to_string()];
            if bayes {
                let (lo, hi) = self.interval(i);
                rec.push(lo.to_string());
                rec.push(hi.to_string());
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv: {e}"))
}

/// Conditioning sets of the test sites and the index of any coincident training site.
struct Neighborhoods {
    sets: Vec<Vec<usize>>,
    duplicate_of: Vec<Option<usize>>,
}

fn neighborhoods(train: &Observed, test: &[Point], m: usize) -> Result<Neighborhoods> {
    let n = train.points.len();
    if train.data.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: train.data.len() });
    }
    if m == 0 || m > n {
        return Err(Error::InvalidArgument(format!("need 1 <= m <= {n}, got {m}")));
    }
    let index = NeighborIndex::new(train.points);
    let sets: Vec<Vec<usize>> = test.par_iter().map(|q| index.nearest(q, m)).collect();
    let duplicate_of = sets
        .iter()
        .zip(test)
        .map(|(s, q)| s.first().copied().filter(|&j| dist(&train.points[j], q) <= ZERO_LAG))
        .collect();
    Ok(Neighborhoods { sets, duplicate_of })
}

enum Solver<'a> {
    Exact,
    Surrogate(&'a SurrogateBank),
}

fn predict_with(
    train: &Observed,
    resid: &[f64],
    test: &[Point],
    nb: &Neighborhoods,
    theta: &CovarianceParams,
    sigma2: f64,
    solver: &Solver,
) -> Result<(Vec<f64>, Vec<f64>)> {
    theta.validate()?;
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma2 must be > 0, got {sigma2}")));
    }
    let kern = Matern::new(theta.phi, theta.nu)?;
    let out: Vec<(f64, f64)> = (0..test.len())
        .into_par_iter()
        .map(|t| -> Result<(f64, f64)> {
            if let Some(j) = nb.duplicate_of[t] {
                return Ok((resid[j], sigma2 * (1.0 - theta.r)));
            }
            let nbrs: Vec<Point> = nb.sets[t].iter().map(|&j| train.points[j]).collect();
            let sol: KrigingSolution = match solver {
                Solver::Exact => exact_kriging_with(&kern, theta.r, &test[t], &nbrs)?,
                Solver::Surrogate(bank) => surrogate_kriging(bank, &test[t], &nbrs, theta)?,
            };
            let mean = nb.sets[t].iter().zip(&sol.weights).map(|(&j, w)| w * resid[j]).sum::<f64>();
            Ok((mean, sigma2 * sol.variance()))
        })
        .collect::<Result<_>>()?;
    Ok(out.into_iter().unzip())
}

fn single(
    train: &Observed,
    test: &[Point],
    theta: &CovarianceParams,
    mu: f64,
    sigma2: f64,
    m: usize,
    solver: &Solver,
) -> Result<PredictionResult> {
    let nb = neighborhoods(train, test, m)?;
    let resid: Vec<f64> = train.data.iter().map(|z| z - mu).collect();
    let (mean, variance) = predict_with(train, &resid, test, &nb, theta, sigma2, solver)?;
    Ok(PredictionResult {
        mean: mean.into_iter().map(|v| v + mu).collect(),
        variance,
        duplicate: nb.duplicate_of.iter().map(Option::is_some).collect(),
        draw_means: None,
        stride: None,
    })
}

/// Mean `mu + sum_j w_j (Z_j - mu)` and variance `sigma2 exp(w_0)` with exact weights.
/// A test site on top of a training site returns the observed value with the
/// nugget variance `sigma2 (1 - r)` and is flagged.
pub fn predict_sites(
    train: &Observed,
    test: &[Point],
    theta: &CovarianceParams,
    mu: f64,
    sigma2: f64,
    m: usize,
) -> Result<PredictionResult> {
    single(train, test, theta, mu, sigma2, m, &Solver::Exact)
}

/// [`predict_sites`] with network weights; `m` is the bank's.
pub fn predict_sites_surrogate(
    train: &Observed,
    test: &[Point],
    theta: &CovarianceParams,
    mu: f64,
    sigma2: f64,
    bank: &SurrogateBank,
) -> Result<PredictionResult> {
    single(train, test, theta, mu, sigma2, bank.m(), &Solver::Surrogate(bank))
}

/// Predictions at every `stride`-th post-burn-in draw, pooled by the law of total
/// variance. Draws use `mu = 0` and the chain's `sigma2` (1 when it has none);
/// with `trend` the chain's `beta` supplies the mean surface.
pub fn predict_bayes(
    train: &Observed,
    test: &[Point],
    chain: &Chain,
    stride: usize,
    m: usize,
    trend: Option<Trend>,
) -> Result<PredictionResult> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be > 0".into()));
    }
    let draws: Vec<usize> = (chain.burn_in..chain.len()).step_by(stride).collect();
    if draws.is_empty() {
        return Err(Error::InvalidArgument("no post-burn-in draws to predict from".into()));
    }
    if let Some(t) = &trend {
        if chain.beta.is_none() {
            return Err(Error::InvalidArgument("trend given but the chain has no beta draws".into()));
        }
        if t.train.nrows() != train.points.len() || t.test.nrows() != test.len() || t.train.ncols() != t.test.ncols() {
            return Err(Error::InvalidArgument("covariate matrices do not match the site counts".into()));
        }
    }
    let nb = neighborhoods(train, test, m)?;
    let per_draw: Vec<(Vec<f64>, Vec<f64>)> = draws
        .par_iter()
        .map(|&it| {
            let theta = chain.theta(it);
            let sigma2 = chain.sigma2.as_ref().map_or(1.0, |s| s[it]);
            match (&trend, &chain.beta) {
                (Some(t), Some(beta)) => {
                    let b = nalgebra::DVector::from_column_slice(&beta[it]);
                    let fit_train = t.train * &b;
                    let fit_test = t.test * &b;
                    let resid: Vec<f64> = train.data.iter().zip(fit_train.iter()).map(|(z, f)| z - f).collect();
                    let (mean, var) = predict_with(train, &resid, test, &nb, &theta, sigma2, &Solver::Exact)?;
                    Ok((mean.iter().zip(fit_test.iter()).map(|(a, f)| a + f).collect(), var))
                }
                _ => predict_with(train, train.data, test, &nb, &theta, sigma2, &Solver::Exact),
            }
        })
        .collect::<Result<_>>()?;
    let d = per_draw.len() as f64;
    let nt = test.len();
    let mut mean = vec![0.0; nt];
    let mut within = vec![0.0; nt];
    for (mu_d, var_d) in &per_draw {
        for t in 0..nt {
            mean[t] += mu_d[t] / d;
            within[t] += var_d[t] / d;
        }
    }
    let variance = (0..nt)
        .map(|t| {
            let between = per_draw.iter().map(|(mu_d, _)| (mu_d[t] - mean[t]).powi(2)).sum::<f64>() / d;
            within[t] + between
        })
        .collect();
    Ok(PredictionResult {
        mean,
        variance,
        duplicate: nb.duplicate_of.iter().map(Option::is_some).collect(),
        draw_means: Some(per_draw.into_iter().map(|(m, _)| m).collect()),
        stride: Some(stride),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::logit;
    use crate::kernel::{corr_matrix, FullParams};
    use crate::rng::rng_from_seed;
    use crate::spatial::{build_graph, LocationSet};
    use crate::vecchia::{simulate_field, SIMULATION_M};
    use nalgebra::DVector;
    use rand::Rng;

    fn field(n: usize, theta: CovarianceParams, seed: u64) -> (Vec<Point>, Vec<f64>) {
        let mut rng = rng_from_seed(seed);
        let pts: Vec<Point> = (0..n).map(|_| [rng.random(), rng.random()]).collect();
        let g = build_graph(&LocationSet::from_unit_coords(pts.clone()).unwrap(), SIMULATION_M).unwrap();
        let z = simulate_field(&pts, &g, &FullParams::standard(theta), seed).unwrap();
        (pts, z)
    }

    fn chain_of(thetas: &[CovarianceParams]) -> Chain {
        Chain {
            phi: thetas.iter().map(|t| t.phi).collect(),
            nu: thetas.iter().map(|t| t.nu).collect(),
            rl: thetas.iter().map(|t| logit(t.r)).collect(),
            log_post: vec![0.0; thetas.len()],
            bins: vec![None; thetas.len()],
            accepted: vec![[true; 3]; thetas.len()],
            ..Default::default()
        }
    }

    #[test]
    fn no_spatial_signal_gives_the_prior() {
        let (pts, z) = field(200, CovarianceParams::new(0.1, 1.0, 0.5).unwrap(), 1);
        let test = [[0.3, 0.3], [0.71, 0.2]];
        let theta = CovarianceParams::new(0.1, 1.0, 0.0).unwrap();
        let p = predict_sites(&Observed { points: &pts, data: &z }, &test, &theta, 0.4, 2.0, 10).unwrap();
        for i in 0..2 {
            assert!((p.mean[i] - 0.4).abs() < 1e-14);
            assert!((p.variance[i] - 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn coincident_site_interpolates() {
        let pts = vec![[0.1, 0.1], [0.9, 0.5], [0.4, 0.8]];
        let z = vec![1.5, -0.2, 0.3];
        let obs = Observed { points: &pts, data: &z };
        let theta = CovarianceParams::new(0.1, 1.0, 0.999_999).unwrap();
        let p = predict_sites(&obs, &[[0.9, 0.5]], &theta, 0.0, 1.0, 1).unwrap();
        assert!(p.duplicate[0]);
        assert_eq!(p.mean[0], -0.2);
        assert!((p.variance[0] - 1e-6).abs() < 1e-12);
        // a site just next to it approaches the observed value
        let p = predict_sites(&obs, &[[0.9, 0.500_001]], &theta, 0.0, 1.0, 1).unwrap();
        assert!(!p.duplicate[0]);
        assert!((p.mean[0] + 0.2).abs() < 1e-3, "{}", p.mean[0]);
    }

    #[test]
    fn full_conditioning_matches_dense_gaussian_conditioning() {
        let theta = CovarianceParams::new(0.1, 1.5, 0.9).unwrap();
        let (pts, z) = field(500, theta, 3);
        let mut rng = rng_from_seed(30);
        let test: Vec<Point> = (0..15).map(|_| [rng.random(), rng.random()]).collect();
        let (mu, s2) = (0.3, 1.7f64);
        let zs: Vec<f64> = z.iter().map(|v| mu + s2.sqrt() * v).collect();
        let p = predict_sites(&Observed { points: &pts, data: &zs }, &test, &theta, mu, s2, 500).unwrap();
        let mut all = pts.clone();
        all.extend_from_slice(&test);
        let c = corr_matrix(&all, &theta).unwrap() * s2;
        let n = pts.len();
        let coo = c.view((0, 0), (n, n)).into_owned();
        let chol = coo.cholesky().unwrap();
        let resid = DVector::from_iterator(n, zs.iter().map(|v| v - mu));
        let alpha = chol.solve(&resid);
        for t in 0..test.len() {
            let cross = c.view((n + t, 0), (1, n)).transpose();
            let mean = mu + cross.dot(&alpha);
            let var = c[(n + t, n + t)] - cross.dot(&chol.solve(&cross.clone_owned()));
            assert!((p.mean[t] - mean).abs() < 1e-8, "{} vs {}", p.mean[t], mean);
            assert!((p.variance[t] - var).abs() < 1e-8, "{} vs {}", p.variance[t], var);
        }
    }

    #[test]
    fn variance_shrinks_with_more_neighbors() {
        let theta = CovarianceParams::new(0.05, 1.0, 0.8).unwrap();
        let (pts, z) = field(400, theta, 5);
        let mut rng = rng_from_seed(50);
        let test: Vec<Point> = (0..40).map(|_| [rng.random(), rng.random()]).collect();
        let obs = Observed { points: &pts, data: &z };
        let vars: Vec<Vec<f64>> =
            [1, 5, 10, 30].iter().map(|&m| predict_sites(&obs, &test, &theta, 0.0, 1.0, m).unwrap().variance).collect();
        for w in vars.windows(2) {
            for t in 0..test.len() {
                assert!(w[1][t] <= w[0][t] + 1e-12);
            }
        }
    }

    #[test]
    fn single_draw_matches_point_prediction() {
        let theta = CovarianceParams::new(0.1, 1.5, 0.9).unwrap();
        let (pts, z) = field(300, theta, 7);
        let test = [[0.5, 0.5], [0.2, 0.95]];
        let obs = Observed { points: &pts, data: &z };
        let chain = chain_of(&[theta]);
        let b = predict_bayes(&obs, &test, &chain, 50, 20, None).unwrap();
        let p = predict_sites(&obs, &test, &chain.theta(0), 0.0, 1.0, 20).unwrap();
        assert_eq!(b.mean, p.mean);
        assert_eq!(b.variance, p.variance);
    }

    #[test]
    fn identical_draws_add_no_between_variance() {
        let theta = CovarianceParams::new(0.1, 1.5, 0.9).unwrap();
        let (pts, z) = field(300, theta, 8);
        let test = [[0.5, 0.5], [0.2, 0.95]];
        let obs = Observed { points: &pts, data: &z };
        let chain = chain_of(&[theta; 120]);
        let b = predict_bayes(&obs, &test, &chain, 50, 20, None).unwrap();
        let p = predict_sites(&obs, &test, &theta, 0.0, 1.0, 20).unwrap();
        assert_eq!(b.draw_means.as_ref().unwrap().len(), 3);
        for t in 0..2 {
            assert!((b.variance[t] - p.variance[t]).abs() < 1e-14);
        }
    }

    #[test]
    fn pooled_variance_covers_the_smallest_draw_variance() {
        let (pts, z) = field(300, CovarianceParams::new(0.1, 1.5, 0.9).unwrap(), 9);
        let test = [[0.5, 0.5], [0.2, 0.95], [0.01, 0.3]];
        let obs = Observed { points: &pts, data: &z };
        let thetas: Vec<CovarianceParams> =
            (0..10).map(|i| CovarianceParams::new(0.05 + 0.01 * i as f64, 1.0 + 0.1 * i as f64, 0.6 + 0.03 * i as f64).unwrap()).collect();
        let b = predict_bayes(&obs, &test, &chain_of(&thetas), 1, 15, None).unwrap();
        for t in 0..test.len() {
            let min = thetas
                .iter()
                .map(|th| predict_sites(&obs, &test[t..t + 1], th, 0.0, 1.0, 15).unwrap().variance[0])
                .fold(f64::INFINITY, f64::min);
            assert!(b.variance[t] >= min);
        }
    }

    #[test]
    fn empty_thinned_set_is_rejected() {
        let pts = vec![[0.1, 0.1], [0.9, 0.5]];
        let z = vec![1.0, 2.0];
        let mut chain = chain_of(&[CovarianceParams::new(0.1, 1.0, 0.5).unwrap(); 4]);
        chain.burn_in = 4;
        let err = predict_bayes(&Observed { points: &pts, data: &z }, &[[0.5, 0.5]], &chain, 50, 1, None);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn csv_layout() {
        let p = PredictionResult { mean: vec![1.0], variance: vec![0.25], duplicate: vec![false], draw_means: Some(vec![vec![1.0]]), stride: Some(50) };
        let mut buf = Vec::new();
        p.write_csv(&[[0.5, 0.25]], &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let mut lines = s.lines();
        assert_eq!(lines.next().unwrap(), "x,y,mean,variance,q025,q975");
        let cells: Vec<f64> = lines.next().unwrap().split(',').map(|c| c.parse().unwrap()).collect();
        assert!((cells[4] - (1.0 - 0.5 * Z975)).abs() < 1e-12);
    }
}
