//! Binned empirical semivariogram and a weighted least-squares fit of
//! `gamma(d) = 1 - r K(d)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{Matern, ParamBounds};
use crate::rng::mix64;
use crate::spatial::{dist, Point};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariogramConfig {
    pub bins: usize,
    /// Largest lag as a quantile of the pairwise distances.
    pub max_quantile: f64,
    /// Above this many sites, bin a random subset of pairs as large as the pair
    /// count of this many sites.
    pub max_sites: usize,
    pub bounds: ParamBounds,
    pub seed: u64,
}

impl Default for VariogramConfig {
    fn default() -> Self {
        Self {
            bins: 15,
            max_quantile: 0.3,
            max_sites: 5_000,
            bounds: ParamBounds::TRAINING_ENVELOPE,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariogramBin {
    /// Bin edges `[lo, hi)`; the last bin includes its upper edge.
    pub lo: f64,
    pub hi: f64,
    /// Mean pair distance in the bin.
    pub lag: f64,
    pub gamma: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariogramFit {
    pub phi: f64,
    pub nu: f64,
    pub r: f64,
    pub bins: Vec<VariogramBin>,
}

const QUANTILE_CELLS: usize = 1 << 16;

/// Semivariance divided by the sample variance, so that a unit sill is expected.
pub fn empirical_variogram(data: &[f64], points: &[Point], config: &VariogramConfig) -> Result<Vec<VariogramBin>> {
    let n = points.len();
    if data.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: data.len() });
    }
    if n < 50 {
        return Err(Error::InvalidArgument(format!("variogram needs at least 50 sites, got {n}")));
    }
    if config.bins == 0 || !(config.max_quantile > 0.0 && config.max_quantile <= 1.0) {
        return Err(Error::InvalidArgument("bad variogram binning".into()));
    }
    let mean = data.iter().sum::<f64>() / n as f64;
    let var = data.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    if !(var > 1e-14) || !var.is_finite() {
        return Err(Error::FlatField);
    }
    // above max_sites, keep each pair independently with the probability that
    // leaves as many pairs as max_sites sites would have
    let keep = if n > config.max_sites {
        let full = n as f64 * (n as f64 - 1.0);
        let kept = config.max_sites as f64 * (config.max_sites as f64 - 1.0);
        kept / full
    } else {
        1.0
    };
    let threshold = (keep * u64::MAX as f64) as u64;
    let salt = mix64(config.seed);
    let selected = |i: usize, j: usize| keep >= 1.0 || mix64(salt ^ ((i as u64) << 32 | j as u64)) <= threshold;
    // pass 1: histogram of pair distances to locate the quantile
    let (dmin, dmax) = bounding_diagonal(points);
    let width = (dmax - dmin).max(1e-300) / QUANTILE_CELLS as f64;
    let mut hist = vec![0u64; QUANTILE_CELLS];
    let mut total = 0u64;
    for i in 0..n {
        for j in i + 1..n {
            if !selected(i, j) {
                continue;
            }
            let d = dist(&points[i], &points[j]);
            let c = (((d - dmin) / width) as usize).min(QUANTILE_CELLS - 1);
            hist[c] += 1;
            total += 1;
        }
    }
    let target = (config.max_quantile * total as f64).ceil() as u64;
    let mut acc = 0u64;
    let mut cell = QUANTILE_CELLS - 1;
    for (c, &h) in hist.iter().enumerate() {
        acc += h;
        if acc >= target {
            cell = c;
            break;
        }
    }
    let cutoff = dmin + (cell + 1) as f64 * width;
    // pass 2: bin pairs up to the cutoff
    let bw = cutoff / config.bins as f64;
    let mut sum_d = vec![0.0; config.bins];
    let mut sum_g = vec![0.0; config.bins];
    let mut count = vec![0usize; config.bins];
    for i in 0..n {
        for j in i + 1..n {
            if !selected(i, j) {
                continue;
            }
            let d = dist(&points[i], &points[j]);
            if d > cutoff {
                continue;
            }
            let b = ((d / bw) as usize).min(config.bins - 1);
            sum_d[b] += d;
            sum_g[b] += 0.5 * (data[i] - data[j]).powi(2);
            count[b] += 1;
        }
    }
    Ok((0..config.bins)
        .filter(|&b| count[b] > 0)
        .map(|b| VariogramBin {
            lo: b as f64 * bw,
            hi: (b + 1) as f64 * bw,
            lag: sum_d[b] / count[b] as f64,
            gamma: sum_g[b] / count[b] as f64 / var,
            pairs: count[b],
        })
        .collect())
}

/// Range of possible pair distances from the bounding box.
fn bounding_diagonal(points: &[Point]) -> (f64, f64) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in points {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (0.0, ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2)).sqrt())
}

/// Profile WLS objective at `(phi, nu)`: the best `r` is available in closed form
/// and is clamped to the bounds.
fn profile(bins: &[VariogramBin], phi: f64, nu: f64, bounds: &ParamBounds) -> Result<(f64, f64)> {
    let k = Matern::new(phi, nu)?;
    let ks: Vec<f64> = bins.iter().map(|b| k.corr(b.lag)).collect();
    let (mut num, mut den) = (0.0, 0.0);
    for (b, kv) in bins.iter().zip(&ks) {
        let w = b.pairs as f64;
        num += w * (1.0 - b.gamma) * kv;
        den += w * kv * kv;
    }
    let r = if den > 0.0 { num / den } else { bounds.r.0 };
    let r = r.clamp(bounds.r.0, bounds.r.1);
    let sse = bins
        .iter()
        .zip(&ks)
        .map(|(b, kv)| b.pairs as f64 * (b.gamma - 1.0 + r * kv).powi(2))
        .sum();
    Ok((sse, r))
}

fn grid(lo: f64, hi: f64, n: usize, log: bool) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            if log {
                (lo.ln() + t * (hi.ln() - lo.ln())).exp()
            } else {
                lo + t * (hi - lo)
            }
        })
        .collect()
}

/// Initial values `(phi_v, nu_v, r_v)` inside `config.bounds`.
pub fn fit_variogram(data: &[f64], points: &[Point], config: &VariogramConfig) -> Result<VariogramFit> {
    let bins = empirical_variogram(data, points, config)?;
    if bins.len() < 2 {
        return Err(Error::FlatField);
    }
    let b = &config.bounds;
    let phis = grid(b.phi.0, b.phi.1, 24, true);
    let nus = grid(b.nu.0, b.nu.1, 13, false);
    let mut best = (f64::INFINITY, phis[0], nus[0], b.r.0);
    let search = |phis: &[f64], nus: &[f64], best: &mut (f64, f64, f64, f64)| -> Result<()> {
        for &phi in phis {
            for &nu in nus {
                let (sse, r) = profile(&bins, phi, nu, b)?;
                if sse < best.0 {
                    *best = (sse, phi, nu, r);
                }
            }
        }
        Ok(())
    };
    search(&phis, &nus, &mut best)?;
    // one refinement on a finer grid spanning the neighboring coarse cells
    let step_phi = (phis[1] / phis[0]).ln();
    let step_nu = nus[1] - nus[0];
    let fine_phi = grid(
        (best.1 * (-step_phi).exp()).max(b.phi.0),
        (best.1 * step_phi.exp()).min(b.phi.1),
        21,
        true,
    );
    let fine_nu = grid((best.2 - step_nu).max(b.nu.0), (best.2 + step_nu).min(b.nu.1), 21, false);
    search(&fine_phi, &fine_nu, &mut best)?;
    Ok(VariogramFit { phi: best.1, nu: best.2, r: best.3, bins })
}
