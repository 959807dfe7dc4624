//! Bounded maximum likelihood: variogram start, then projected BFGS on the unit
//! box with finite-difference gradients.

use std::time::Instant;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::variogram::{fit_variogram, VariogramConfig};
use crate::error::{Error, Result};
use crate::kernel::{CovarianceParams, FullParams, ParamBounds};
use crate::spatial::{OrderedNeighborGraph, Point};
use crate::surrogate::{SurrogateBank, SurrogateProvider};
use crate::vecchia::{vecchia_loglik, KrigingProvider};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleConfig {
    /// Stop once the relative objective change of an accepted step is below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Relative finite-difference step on the natural scale.
    pub fd_step: f64,
    pub bounds: ParamBounds,
    /// Starting point; the variogram fit when absent.
    #[serde(default)]
    pub init: Option<CovarianceParams>,
    #[serde(default)]
    pub variogram: VariogramConfig,
}

impl Default for MleConfig {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iter: 500,
            fd_step: 1e-5,
            bounds: ParamBounds::TRAINING_ENVELOPE,
            init: None,
            variogram: VariogramConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleResult {
    pub estimate: CovarianceParams,
    pub converged: bool,
    /// Converged because no decrease could be found along the projected gradient.
    pub stalled: bool,
    pub iterations: usize,
    /// Log-likelihood at `estimate`.
    pub loglik: f64,
    /// Starting point `(phi_v, nu_v, r_v)`.
    pub init: CovarianceParams,
    pub evaluations: usize,
    /// Network bin used for the final fit, with a bank.
    pub bin: Option<usize>,
    /// Whether the fit was repeated in the bin of the first optimum.
    pub refit: bool,
    /// Log-likelihood after every accepted step.
    pub trace: Vec<f64>,
    pub seconds: f64,
}

/// Maximize `loglik` over `config.bounds` from `init`.
pub fn maximize<F: FnMut(&CovarianceParams) -> Result<f64>>(
    mut loglik: F,
    init: CovarianceParams,
    config: &MleConfig,
) -> Result<MleResult> {
    let start = Instant::now();
    let lo = Vector3::from(config.bounds.lower());
    let hi = Vector3::from(config.bounds.upper());
    let span = hi - lo;
    if span.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::InvalidArgument("bounds must have lo < hi".into()));
    }
    let to_theta = |u: &Vector3<f64>| CovarianceParams {
        phi: lo[0] + span[0] * u[0],
        nu: lo[1] + span[1] * u[1],
        r: lo[2] + span[2] * u[2],
    };
    let init = config.bounds.clamp(&init);
    let mut evaluations = 0usize;
    // minimize f = -loglik; failures count as +inf so line searches back off
    let mut f = |u: &Vector3<f64>| -> Result<f64> {
        evaluations += 1;
        match loglik(&to_theta(u)) {
            Ok(v) if v.is_finite() => Ok(-v),
            Ok(_) | Err(Error::NotPositiveDefinite { .. }) | Err(Error::OutOfEnvelope { .. }) => Ok(f64::INFINITY),
            Err(e) => Err(e),
        }
    };
    let mut x = Vector3::new(
        (init.phi - lo[0]) / span[0],
        (init.nu - lo[1]) / span[1],
        (init.r - lo[2]) / span[2],
    )
    .map(|v| v.clamp(0.0, 1.0));
    let mut fx = f(&x)?;
    if !fx.is_finite() {
        return Err(Error::Numerical(format!("log-likelihood is not finite at the start {init:?}")));
    }
    let grad = |f: &mut dyn FnMut(&Vector3<f64>) -> Result<f64>, x: &Vector3<f64>, fx: f64| -> Result<Vector3<f64>> {
        let mut g = Vector3::zeros();
        for k in 0..3 {
            let natural = lo[k] + span[k] * x[k];
            let h = (config.fd_step * natural.abs()).max(1e-12) / span[k];
            let up = x[k] + h <= 1.0;
            let down = x[k] - h >= 0.0;
            let shifted = |d: f64| {
                let mut y = *x;
                y[k] += d;
                y
            };
            g[k] = match (up, down) {
                (true, true) => {
                    let (a, b) = (f(&shifted(h))?, f(&shifted(-h))?);
                    match (a.is_finite(), b.is_finite()) {
                        (true, true) => (a - b) / (2.0 * h),
                        (true, false) => (a - fx) / h,
                        (false, true) => (fx - b) / h,
                        (false, false) => return Err(Error::Numerical("gradient evaluation failed".into())),
                    }
                }
                (true, false) => (f(&shifted(h))? - fx) / h,
                (false, true) => (fx - f(&shifted(-h))?) / h,
                (false, false) => 0.0,
            };
            if !g[k].is_finite() {
                return Err(Error::Numerical("gradient evaluation failed".into()));
            }
        }
        Ok(g)
    };
    let mut g = grad(&mut f, &x, fx)?;
    let mut hinv = Matrix3::identity();
    let mut fresh = true;
    let mut converged = false;
    let mut stalled = false;
    let mut iterations = 0;
    let mut trace = vec![-fx];
    while iterations < config.max_iter {
        iterations += 1;
        // active set: pinned at a bound with the descent direction pointing outward
        let free: [bool; 3] = std::array::from_fn(|k| !((x[k] <= 0.0 && g[k] > 0.0) || (x[k] >= 1.0 && g[k] < 0.0)));
        let mask = Vector3::from_fn(|k, _| if free[k] { 1.0 } else { 0.0 });
        let gf = g.component_mul(&mask);
        if gf.norm() == 0.0 {
            converged = true;
            break;
        }
        let reduced = Matrix3::from_fn(|i, j| if free[i] && free[j] { hinv[(i, j)] } else { 0.0 });
        let mut d = -(reduced * gf);
        if gf.dot(&d) >= 0.0 {
            hinv = Matrix3::identity();
            d = -gf;
        }
        if fresh {
            // first step moves at most 0.1 of the box
            let scale = 0.1 / d.amax();
            if scale < 1.0 {
                d *= scale;
            }
        }
        let mut step = line_search(&mut f, &x, fx, &g, &d)?;
        if step.is_none() && !fresh {
            hinv = Matrix3::identity();
            let mut sd = -gf;
            sd *= (0.1 / sd.amax()).min(1.0);
            step = line_search(&mut f, &x, fx, &g, &sd)?;
        }
        let Some((xn, fxn)) = step else {
            stalled = true;
            converged = true;
            break;
        };
        let gn = grad(&mut f, &xn, fxn)?;
        let s = xn - x;
        let y = gn - g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh {
                hinv = Matrix3::identity() * (sy / y.norm_squared());
            }
            let rho = 1.0 / sy;
            let i = Matrix3::identity();
            hinv = (i - rho * s * y.transpose()) * hinv * (i - rho * y * s.transpose()) + rho * s * s.transpose();
            fresh = false;
        }
        let change = (fx - fxn).abs() / fx.abs().max(1.0);
        x = xn;
        fx = fxn;
        g = gn;
        trace.push(-fx);
        if change < config.tol {
            converged = true;
            break;
        }
    }
    Ok(MleResult {
        estimate: config.bounds.clamp(&to_theta(&x)),
        converged,
        stalled,
        iterations,
        loglik: -fx,
        init,
        evaluations,
        bin: None,
        refit: false,
        trace,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Projected Armijo backtracking along `d`. `None` if no decrease is found.
fn line_search(
    f: &mut dyn FnMut(&Vector3<f64>) -> Result<f64>,
    x: &Vector3<f64>,
    fx: f64,
    g: &Vector3<f64>,
    d: &Vector3<f64>,
) -> Result<Option<(Vector3<f64>, f64)>> {
    let mut alpha = 1.0;
    for _ in 0..40 {
        let xn = (x + alpha * d).map(|v| v.clamp(0.0, 1.0));
        let moved = xn - x;
        if moved.amax() < 1e-14 {
            return Ok(None);
        }
        let fxn = f(&xn)?;
        if fxn.is_finite() && fxn <= fx + 1e-4 * g.dot(&moved) && fxn < fx {
            return Ok(Some((xn, fxn)));
        }
        alpha *= 0.5;
    }
    Ok(None)
}

fn start_point(data: &[f64], points: &[Point], config: &MleConfig) -> Result<CovarianceParams> {
    match config.init {
        Some(t) => Ok(t),
        None => {
            let v = fit_variogram(data, points, &VariogramConfig { bounds: config.bounds, ..config.variogram })?;
            Ok(CovarianceParams { phi: v.phi, nu: v.nu, r: v.r })
        }
    }
}

/// MLE with any provider on the standardized process.
pub fn fit_mle(
    data: &[f64],
    points: &[Point],
    graph: &OrderedNeighborGraph,
    provider: &dyn KrigingProvider,
    config: &MleConfig,
) -> Result<MleResult> {
    let init = start_point(data, points, config)?;
    maximize(|t| vecchia_loglik(data, points, graph, provider, &FullParams::standard(*t)), init, config)
}

/// MLE with the networks of one bin, chosen from the starting `r`. When the
/// optimum's `r` selects another bin the fit is repeated once in that bin.
pub fn fit_mle_surrogate(
    data: &[f64],
    points: &[Point],
    graph: &OrderedNeighborGraph,
    bank: &SurrogateBank,
    config: &MleConfig,
) -> Result<MleResult> {
    let init = start_point(data, points, config)?;
    let first_bin = bank.select_bin(init.r).index;
    let run = |bin: usize, from: CovarianceParams| {
        let provider = SurrogateProvider::with_bin(bank, bin);
        maximize(|t| vecchia_loglik(data, points, graph, &provider, &FullParams::standard(*t)), from, config)
    };
    let mut res = run(first_bin, init)?;
    res.bin = Some(first_bin);
    let second_bin = bank.select_bin(res.estimate.r).index;
    if second_bin != first_bin {
        let (evals, secs) = (res.evaluations, res.seconds);
        let mut again = run(second_bin, res.estimate)?;
        again.init = init;
        again.evaluations += evals;
        again.seconds += secs;
        again.bin = Some(second_bin);
        again.refit = true;
        res = again;
    }
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::spatial::{build_graph, LocationSet};
    use crate::vecchia::{simulate_field, CachedExactProvider, SIMULATION_M};
    use rand::Rng;

    #[test]
    fn quadratic_with_interior_optimum() {
        let cfg = MleConfig::default();
        let init = CovarianceParams { phi: 0.1, nu: 0.5, r: 0.3 };
        let res = maximize(
            |t| Ok(-((t.phi - 0.04) / 0.01).powi(2) - (t.nu - 1.2).powi(2) - 4.0 * (t.r - 0.7).powi(2)),
            init,
            &cfg,
        )
        .unwrap();
        assert!(res.converged);
        assert!((res.estimate.phi - 0.04).abs() < 1e-3, "{res:?}");
        assert!((res.estimate.nu - 1.2).abs() < 1e-2);
        assert!((res.estimate.r - 0.7).abs() < 1e-2);
    }

    #[test]
    fn pinned_at_bound_stays_feasible() {
        // increasing in r everywhere: the optimum sits on the upper bound
        let cfg = MleConfig::default();
        let init = CovarianceParams { phi: 0.05, nu: 1.0, r: 0.99 };
        let res = maximize(|t| Ok(10.0 * t.r - (t.phi - 0.05).powi(2) - (t.nu - 1.0).powi(2)), init, &cfg).unwrap();
        assert!(res.converged);
        assert_eq!(res.estimate.r, 0.99);
        assert!(cfg.bounds.contains(&res.estimate));
        // and from the lower corner, with the objective pushing outward on phi
        let init = CovarianceParams { phi: 0.005, nu: 0.3, r: 0.18 };
        let res = maximize(|t| Ok(-t.phi - (t.nu - 1.0).powi(2) - (t.r - 0.5).powi(2)), init, &cfg).unwrap();
        assert_eq!(res.estimate.phi, 0.005);
        assert!(cfg.bounds.contains(&res.estimate));
    }

    #[test]
    fn accepted_steps_never_decrease_the_objective() {
        let cfg = MleConfig::default();
        let init = CovarianceParams { phi: 0.11, nu: 2.5, r: 0.2 };
        let res = maximize(
            |t| Ok(-(t.phi.ln() - 0.03f64.ln()).powi(2) * 3.0 - (t.nu - 0.9).powi(2) * (1.0 + t.r) - (t.r - 0.6).powi(2)),
            init,
            &cfg,
        )
        .unwrap();
        assert!(res.trace.windows(2).all(|w| w[1] >= w[0]), "{:?}", res.trace);
    }

    /// Zoom a 9^3 grid around its best point.
    fn grid_refine(f: &mut dyn FnMut(&CovarianceParams) -> f64, bounds: &ParamBounds, rounds: usize) -> (CovarianceParams, f64) {
        let mut lo = bounds.lower();
        let mut hi = bounds.upper();
        let mut best = (CovarianceParams { phi: lo[0], nu: lo[1], r: lo[2] }, f64::NEG_INFINITY);
        for _ in 0..rounds {
            let at = |k: usize, i: usize, lo: &[f64; 3], hi: &[f64; 3]| lo[k] + (hi[k] - lo[k]) * i as f64 / 8.0;
            for i in 0..9 {
                for j in 0..9 {
                    for l in 0..9 {
                        let t = CovarianceParams { phi: at(0, i, &lo, &hi), nu: at(1, j, &lo, &hi), r: at(2, l, &lo, &hi) };
                        let v = f(&t);
                        if v > best.1 {
                            best = (t, v);
                        }
                    }
                }
            }
            let c = [best.0.phi, best.0.nu, best.0.r];
            let (blo, bhi) = (bounds.lower(), bounds.upper());
            for k in 0..3 {
                let w = (hi[k] - lo[k]) / 8.0;
                lo[k] = (c[k] - w).max(blo[k]);
                hi[k] = (c[k] + w).min(bhi[k]);
            }
        }
        best
    }

    #[test]
    fn exact_likelihood_matches_grid_refinement() {
        let mut rng = rng_from_seed(21);
        let pts: Vec<Point> = (0..500).map(|_| [rng.random(), rng.random()]).collect();
        let locs = LocationSet::from_unit_coords(pts.clone()).unwrap();
        let theta = CovarianceParams::new(0.05, 1.0, 0.8).unwrap();
        let z = simulate_field(&pts, &build_graph(&locs, SIMULATION_M).unwrap(), &FullParams::standard(theta), 4).unwrap();
        let g = build_graph(&locs, 10).unwrap();
        let prov = CachedExactProvider::new(&pts, &g);
        let cfg = MleConfig::default();
        let res = fit_mle(&z, &pts, &g, &prov, &cfg).unwrap();
        assert!(res.converged, "{res:?}");
        let mut f = |t: &CovarianceParams| vecchia_loglik(&z, &pts, &g, &prov, &FullParams::standard(*t)).unwrap();
        let (grid_best, grid_ll) = grid_refine(&mut f, &cfg.bounds, 6);
        assert!(res.loglik >= grid_ll - cfg.tol * grid_ll.abs(), "{} vs grid {}", res.loglik, grid_ll);
        assert!((res.estimate.r - grid_best.r).abs() < 0.02, "{:?} vs {:?}", res.estimate, grid_best);
        assert!((res.estimate.phi - grid_best.phi).abs() < 0.01);
        assert!(cfg.bounds.contains(&res.estimate));
    }
}
