//! Gibbs steps for regression coefficients and the marginal variance given the
//! current Kriging solutions.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use super::PriorSpec;
use crate::error::{Error, Result};
use crate::spatial::OrderedNeighborGraph;
use crate::vecchia::KrigingSolution;

/// `Z* = Z_i - sum_j w_ij Z_j` and `X* = X_i - sum_j w_ij X_j` per ordered position,
/// with `exp(w_i0)`. Rows of `covariates` are original site indices.
pub struct Decorrelated {
    pub z: DVector<f64>,
    pub x: DMatrix<f64>,
    pub var_factor: DVector<f64>,
}

pub fn decorrelate(
    data: &[f64],
    covariates: &DMatrix<f64>,
    graph: &OrderedNeighborGraph,
    solutions: &[KrigingSolution],
) -> Result<Decorrelated> {
    let n = graph.len();
    if data.len() != n || covariates.nrows() != n || solutions.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: if data.len() != n { data.len() } else if covariates.nrows() != n { covariates.nrows() } else { solutions.len() },
        });
    }
    let p = covariates.ncols();
    if p == 0 {
        return Err(Error::InvalidArgument("need at least one covariate column".into()));
    }
    let order = graph.order();
    let mut z = DVector::zeros(n);
    let mut x = DMatrix::zeros(n, p);
    let mut var_factor = DVector::zeros(n);
    for pos in 0..n {
        let i = order[pos];
        let sol = &solutions[pos];
        let mut zi = data[i];
        let mut xi: Vec<f64> = covariates.row(i).iter().copied().collect();
        for (&q, w) in graph.neighbors(pos).iter().zip(&sol.weights) {
            let j = order[q];
            zi -= w * data[j];
            for c in 0..p {
                xi[c] -= w * covariates[(j, c)];
            }
        }
        z[pos] = zi;
        for c in 0..p {
            x[(pos, c)] = xi[c];
        }
        var_factor[pos] = sol.log_variance.exp();
    }
    Ok(Decorrelated { z, x, var_factor })
}

/// Mean and covariance of the Normal full conditional of `beta`:
/// precision `X*' D^-1 X* + I / beta_var`, mean `P^-1 X*' D^-1 Z*`, `D = sigma2 exp(w0)`.
pub fn beta_posterior(dec: &Decorrelated, sigma2: f64, priors: &PriorSpec) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let p = dec.x.ncols();
    let dinv = dec.var_factor.map(|v| 1.0 / (sigma2 * v));
    let mut xd = dec.x.clone();
    for (mut row, d) in xd.row_iter_mut().zip(dinv.iter()) {
        row *= *d;
    }
    let precision = dec.x.transpose() * &xd + DMatrix::identity(p, p) / priors.beta_var;
    let rhs = xd.transpose() * &dec.z;
    let chol = precision.cholesky().ok_or_else(|| Error::Numerical("singular posterior precision for beta".into()))?;
    let mean = chol.solve(&rhs);
    let cov = chol.inverse();
    Ok((mean, cov))
}

pub fn update_beta<R: Rng + ?Sized>(
    dec: &Decorrelated,
    sigma2: f64,
    priors: &PriorSpec,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let (mean, cov) = beta_posterior(dec, sigma2, priors)?;
    let l = cov
        .cholesky()
        .ok_or_else(|| Error::Numerical("posterior covariance of beta is not positive definite".into()))?
        .unpack();
    let eps = DVector::from_iterator(mean.len(), (0..mean.len()).map(|_| StandardNormal.sample(rng)));
    Ok((mean + l * eps).iter().copied().collect())
}

/// Shape and rate of the Inverse-Gamma full conditional of `sigma2`.
pub fn sigma2_posterior(dec: &Decorrelated, beta: &[f64], priors: &PriorSpec) -> Result<(f64, f64)> {
    if beta.len() != dec.x.ncols() {
        return Err(Error::DimensionMismatch { expected: dec.x.ncols(), got: beta.len() });
    }
    let b = DVector::from_column_slice(beta);
    let resid = &dec.z - &dec.x * b;
    let ss: f64 = resid
        .iter()
        .zip(dec.var_factor.iter())
        .map(|(e, v)| e * e / (2.0 * v))
        .sum();
    Ok((dec.z.len() as f64 / 2.0 + priors.sigma2_a, ss + priors.sigma2_b))
}

pub fn update_sigma2<R: Rng + ?Sized>(dec: &Decorrelated, beta: &[f64], priors: &PriorSpec, rng: &mut R) -> Result<f64> {
    let (shape, rate) = sigma2_posterior(dec, beta, priors)?;
    let g = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(1.0 / g.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::CovarianceParams;
    use crate::rng::rng_from_seed;
    use crate::spatial::{build_graph, LocationSet, Point};
    use crate::vecchia::{ExactProvider, KrigingProvider};

    fn no_spatial(x: DMatrix<f64>, z: Vec<f64>) -> (Decorrelated, usize) {
        let n = z.len();
        (
            Decorrelated {
                z: DVector::from_vec(z),
                x,
                var_factor: DVector::from_element(n, 1.0),
            },
            n,
        )
    }

    #[test]
    fn flat_prior_without_weights_is_least_squares() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let (dec, _) = no_spatial(x.clone(), vec![1.0, 2.9, 5.1, 7.0]);
        let priors = PriorSpec { beta_var: 1e12, ..PriorSpec::default() };
        let (mean, _) = beta_posterior(&dec, 1.0, &priors).unwrap();
        let ols = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * &dec.z;
        assert!((mean - ols).norm() < 1e-8);
    }

    #[test]
    fn scalar_conjugate_mean_update() {
        let z = vec![0.5, 1.5, 1.0, 2.0];
        let (dec, n) = no_spatial(DMatrix::from_element(4, 1, 1.0), z.clone());
        let priors = PriorSpec { beta_var: 2.0, ..PriorSpec::default() };
        let s2 = 0.5;
        let (mean, cov) = beta_posterior(&dec, s2, &priors).unwrap();
        let prec = n as f64 / s2 + 1.0 / 2.0;
        let sum: f64 = z.iter().sum();
        assert!((cov[(0, 0)] - 1.0 / prec).abs() < 1e-14);
        assert!((mean[0] - sum / s2 / prec).abs() < 1e-14);
    }

    #[test]
    fn sigma2_hand_example() {
        let (dec, _) = no_spatial(DMatrix::from_element(1, 1, 1.0), vec![2.0]);
        let priors = PriorSpec { sigma2_a: 1.0, sigma2_b: 0.5, ..PriorSpec::default() };
        assert_eq!(sigma2_posterior(&dec, &[0.0], &priors).unwrap(), (1.5, 2.5));
        let (dec, _) = no_spatial(DMatrix::from_element(3, 1, 1.0), vec![0.7; 3]);
        assert_eq!(sigma2_posterior(&dec, &[0.7], &priors).unwrap(), (2.5, 0.5));
    }

    #[test]
    fn decorrelation_uses_weights() {
        let mut rng = rng_from_seed(5);
        let pts: Vec<Point> = (0..30).map(|_| [rng.random(), rng.random()]).collect();
        let g = build_graph(&LocationSet::from_unit_coords(pts.clone()).unwrap(), 4).unwrap();
        let sols = ExactProvider.solve_graph(&pts, &g, &CovarianceParams::new(0.2, 1.0, 0.8).unwrap()).unwrap();
        let z: Vec<f64> = (0..30).map(|i| i as f64 * 0.1).collect();
        let x = DMatrix::from_fn(30, 2, |i, c| if c == 0 { 1.0 } else { pts[i][0] });
        let dec = decorrelate(&z, &x, &g, &sols).unwrap();
        let pos = 10;
        let i = g.order()[pos];
        let manual: f64 = z[i]
            - g.neighbors(pos)
                .iter()
                .zip(&sols[pos].weights)
                .map(|(&q, w)| w * z[g.order()[q]])
                .sum::<f64>();
        assert!((dec.z[pos] - manual).abs() < 1e-14);
        let manual_x: f64 = 1.0 - sols[pos].weights.iter().sum::<f64>();
        assert!((dec.x[(pos, 0)] - manual_x).abs() < 1e-14);
    }
}
