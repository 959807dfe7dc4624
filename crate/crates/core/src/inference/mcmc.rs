//! Random-walk Metropolis-Hastings over `(phi, nu, r_L)`, one coordinate at a time.
//!
//! `phi` and `nu` move by log-normal steps, `r_L` by a normal step. With
//! covariates, Gibbs draws of `beta` and `sigma2` follow each sweep.

use std::io::{Read, Write};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::conjugate::{decorrelate, update_beta, update_sigma2};
use super::ess::{ess, EssEstimate};
use super::prior::{inv_logit, log_prior_rl, logit, PriorSpec};
use crate::error::{Error, Result};
use crate::kernel::{CovarianceParams, ParamBounds};
use crate::rng::rng_from_seed;
use crate::spatial::{OrderedNeighborGraph, Point};
use crate::vecchia::{loglik_terms, pairwise_sum, KrigingProvider, KrigingSolution};

pub const PARAM_NAMES: [&str; 3] = ["phi", "nu", "r"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub iterations: usize,
    pub burn_in: usize,
    /// Proposal standard deviations for `log phi`, `log nu` and `r_L`.
    pub tune: [f64; 3],
    /// Robbins-Monro scaling of `tune` during burn-in, aiming at 0.44 acceptance.
    #[serde(default)]
    pub adapt: bool,
    /// Drop the likelihood and sample the prior.
    #[serde(default)]
    pub prior_only: bool,
    /// Starting point; prior medians (clamped to the envelope) when absent.
    #[serde(default)]
    pub init: Option<CovarianceParams>,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            iterations: 12_000,
            burn_in: 2_000,
            tune: [0.1; 3],
            adapt: false,
            prior_only: false,
            init: None,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be > 0".into()));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::InvalidArgument(format!(
                "burn-in {} must be below iterations {}",
                self.burn_in, self.iterations
            )));
        }
        if self.tune.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
            return Err(Error::InvalidArgument("tune must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Prior medians, clamped to `bounds`.
pub fn default_init(priors: &PriorSpec, bounds: &ParamBounds) -> CovarianceParams {
    let phi_median = (priors.phi_shape - 1.0 / 3.0).max(0.1) / priors.phi_rate;
    bounds.clamp(&CovarianceParams {
        phi: phi_median,
        nu: priors.nu_log_mean.exp(),
        r: inv_logit(priors.rl_mean),
    })
}

/// Every iteration, burn-in included.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    pub phi: Vec<f64>,
    pub nu: Vec<f64>,
    pub rl: Vec<f64>,
    pub log_post: Vec<f64>,
    pub bins: Vec<Option<usize>>,
    pub accepted: Vec<[bool; 3]>,
    pub accept_counts: [usize; 3],
    /// Candidates outside the surrogate envelope.
    pub envelope_rejections: [usize; 3],
    /// Candidates whose Kriging systems were not positive definite.
    pub numerical_rejections: [usize; 3],
    pub burn_in: usize,
    /// Proposal scales after any adaptation.
    pub tune: [f64; 3],
    pub sigma2: Option<Vec<f64>>,
    pub beta: Option<Vec<Vec<f64>>>,
    /// Wall-clock time of the sampling loop.
    pub sampling_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
    pub ess: f64,
    pub ess_per_min: f64,
    pub degenerate: bool,
    pub acceptance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub iterations: usize,
    pub burn_in: usize,
    pub phi: ParamSummary,
    pub nu: ParamSummary,
    pub r: ParamSummary,
    pub envelope_rejections: [usize; 3],
    pub numerical_rejections: [usize; 3],
    pub sampling_seconds: f64,
}

/// Linear-interpolation quantile of sorted values.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, p)
}

impl Chain {
    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }

    pub fn r(&self) -> Vec<f64> {
        self.rl.iter().map(|&x| inv_logit(x)).collect()
    }

    pub fn theta(&self, it: usize) -> CovarianceParams {
        CovarianceParams {
            phi: self.phi[it],
            nu: self.nu[it],
            r: inv_logit(self.rl[it]),
        }
    }

    /// Post-burn-in draws of `phi`, `nu` and `r`.
    pub fn kept(&self) -> [Vec<f64>; 3] {
        let b = self.burn_in.min(self.len());
        [
            self.phi[b..].to_vec(),
            self.nu[b..].to_vec(),
            self.rl[b..].iter().map(|&x| inv_logit(x)).collect(),
        ]
    }

    pub fn summary(&self) -> Result<ChainSummary> {
        if self.len() <= self.burn_in {
            return Err(Error::InvalidArgument("chain has no post-burn-in draws".into()));
        }
        let kept = self.kept();
        let n = kept[0].len();
        let minutes = self.sampling_seconds / 60.0;
        let b = self.burn_in;
        let make = |k: usize, draws: &[f64]| {
            let mean = draws.iter().sum::<f64>() / n as f64;
            let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
            let EssEstimate { ess, degenerate } = ess(draws);
            let acc = self.accepted[b..].iter().filter(|a| a[k]).count();
            ParamSummary {
                mean,
                sd: var.sqrt(),
                q025: quantile(draws, 0.025),
                q975: quantile(draws, 0.975),
                ess,
                ess_per_min: if minutes > 0.0 { ess / minutes } else { f64::INFINITY },
                degenerate,
                acceptance: acc as f64 / n as f64,
            }
        };
        Ok(ChainSummary {
            iterations: self.len(),
            burn_in: self.burn_in,
            phi: make(0, &kept[0]),
            nu: make(1, &kept[1]),
            r: make(2, &kept[2]),
            envelope_rejections: self.envelope_rejections,
            numerical_rejections: self.numerical_rejections,
            sampling_seconds: self.sampling_seconds,
        })
    }

    /// Columns `iteration,phi,nu,r,r_l,log_post,bin,acc_phi,acc_nu,acc_r`, then
    /// `sigma2,beta1..` in the hierarchical mode. An empty `bin` cell means no bins.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let p = self.beta.as_ref().and_then(|b| b.first()).map_or(0, Vec::len);
        let mut header: Vec<String> = ["iteration", "phi", "nu", "r", "r_l", "log_post", "bin", "acc_phi", "acc_nu", "acc_r"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        if self.sigma2.is_some() {
            header.push("sigma2".into());
            header.extend((1..=p).map(|j| format!("beta{j}")));
        }
        w.write_record(&header).map_err(csv_err)?;
        for it in 0..self.len() {
            let mut rec = vec![
                it.to_string(),
                format!("{:e}", self.phi[it]),
                format!("{:e}", self.nu[it]),
                format!("{:e}", inv_logit(self.rl[it])),
                format!("{:e}", self.rl[it]),
                format!("{:e}", self.log_post[it]),
                self.bins[it].map(|b| b.to_string()).unwrap_or_default(),
            ];
            rec.extend(self.accepted[it].iter().map(|&a| u8::from(a).to_string()));
            if let Some(s2) = &self.sigma2 {
                rec.push(format!("{:e}", s2[it]));
                if let Some(beta) = &self.beta {
                    rec.extend(beta[it].iter().map(|b| format!("{b:e}")));
                }
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Inverse of [`Chain::write_csv`]. Counters other than acceptance are not stored
    /// in the file and come back as zero.
    pub fn read_csv<R: Read>(input: R, burn_in: usize) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(input);
        let header = rd.headers().map_err(csv_err)?.clone();
        let col = |name: &str| header.iter().position(|h| h == name);
        let need = |name: &str| col(name).ok_or_else(|| Error::InvalidArgument(format!("chain CSV lacks column {name}")));
        let (cphi, cnu, crl, clp, cbin) = (need("phi")?, need("nu")?, need("r_l")?, need("log_post")?, need("bin")?);
        let cacc = [need("acc_phi")?, need("acc_nu")?, need("acc_r")?];
        let cs2 = col("sigma2");
        let cbeta: Vec<usize> = (1..).map_while(|j| col(&format!("beta{j}"))).collect();
        let mut chain = Chain { burn_in, sigma2: cs2.map(|_| Vec::new()), beta: cs2.map(|_| Vec::new()), ..Default::default() };
        for (i, rec) in rd.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let num = |c: usize| -> Result<f64> {
                rec.get(c)
                    .unwrap_or("")
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidArgument(format!("chain CSV line {}: {e}", i + 2)))
            };
            chain.phi.push(num(cphi)?);
            chain.nu.push(num(cnu)?);
            chain.rl.push(num(crl)?);
            chain.log_post.push(num(clp)?);
            let bin = rec.get(cbin).unwrap_or("").trim();
            chain.bins.push(if bin.is_empty() { None } else { Some(num(cbin)? as usize) });
            let mut acc = [false; 3];
            for k in 0..3 {
                acc[k] = num(cacc[k])? != 0.0;
                chain.accept_counts[k] += usize::from(acc[k]);
            }
            chain.accepted.push(acc);
            if let Some(c) = cs2 {
                chain.sigma2.as_mut().unwrap().push(num(c)?);
                let b = cbeta.iter().map(|&c| num(c)).collect::<Result<Vec<_>>>()?;
                chain.beta.as_mut().unwrap().push(b);
            }
        }
        Ok(chain)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv: {e}"))
}

/// Log-likelihood as a function of the correlation parameters.
trait Target {
    fn loglik(&mut self, theta: &CovarianceParams) -> Result<f64>;
    /// The last evaluated candidate becomes the current state.
    fn commit(&mut self) {}
    /// Gibbs updates at the current state; returns the refreshed log-likelihood.
    fn gibbs<R: Rng>(&mut self, _priors: &PriorSpec, _rng: &mut R) -> Result<Option<f64>> {
        Ok(None)
    }
    fn bin(&self, _r: f64) -> Option<usize> {
        None
    }
    fn extras(&self) -> Option<(f64, Vec<f64>)> {
        None
    }
}

struct PriorOnly;

impl Target for PriorOnly {
    fn loglik(&mut self, _theta: &CovarianceParams) -> Result<f64> {
        Ok(0.0)
    }
}

struct Closure<F>(F);

impl<F: FnMut(&CovarianceParams) -> f64> Target for Closure<F> {
    fn loglik(&mut self, theta: &CovarianceParams) -> Result<f64> {
        Ok((self.0)(theta))
    }
}

struct Spatial<'a> {
    data: &'a [f64],
    points: &'a [Point],
    graph: &'a OrderedNeighborGraph,
    provider: &'a dyn KrigingProvider,
    covariates: Option<&'a DMatrix<f64>>,
    beta: Vec<f64>,
    sigma2: f64,
    resid: Vec<f64>,
    candidate: Option<Vec<KrigingSolution>>,
    current: Option<Vec<KrigingSolution>>,
}

impl Spatial<'_> {
    fn refresh_resid(&mut self) {
        if let Some(x) = self.covariates {
            for i in 0..self.data.len() {
                let fit: f64 = x.row(i).iter().zip(&self.beta).map(|(a, b)| a * b).sum();
                self.resid[i] = self.data[i] - fit;
            }
        }
    }

    fn loglik_with(&self, sols: &[KrigingSolution]) -> Result<f64> {
        let terms = loglik_terms(&self.resid, self.graph, sols, 0.0, self.sigma2)?;
        Ok(pairwise_sum(&terms))
    }
}

impl Target for Spatial<'_> {
    fn loglik(&mut self, theta: &CovarianceParams) -> Result<f64> {
        let sols = self.provider.solve_graph(self.points, self.graph, theta)?;
        let ll = self.loglik_with(&sols)?;
        if self.covariates.is_some() {
            self.candidate = Some(sols);
        }
        Ok(ll)
    }

    fn commit(&mut self) {
        if let Some(c) = self.candidate.take() {
            self.current = Some(c);
        }
    }

    fn gibbs<R: Rng>(&mut self, priors: &PriorSpec, rng: &mut R) -> Result<Option<f64>> {
        let Some(x) = self.covariates else { return Ok(None) };
        let sols = self.current.as_ref().expect("current solutions are set after the first evaluation");
        let dec = decorrelate(self.data, x, self.graph, sols)?;
        self.beta = update_beta(&dec, self.sigma2, priors, rng)?;
        self.sigma2 = update_sigma2(&dec, &self.beta, priors, rng)?;
        self.refresh_resid();
        let sols = self.current.take().unwrap();
        let ll = self.loglik_with(&sols);
        self.current = Some(sols);
        ll.map(Some)
    }

    fn bin(&self, r: f64) -> Option<usize> {
        self.provider.bin_for(r)
    }

    fn extras(&self) -> Option<(f64, Vec<f64>)> {
        self.covariates.map(|_| (self.sigma2, self.beta.clone()))
    }
}

/// Chain on the standardized process (`mu = 0`, `sigma2 = 1`). `data` and `points`
/// are indexed by original site index.
pub fn run_mcmc(
    data: &[f64],
    points: &[Point],
    graph: &OrderedNeighborGraph,
    provider: &dyn KrigingProvider,
    priors: &PriorSpec,
    config: &McmcConfig,
    seed: u64,
) -> Result<Chain> {
    check_inputs(data, points, graph)?;
    if config.prior_only {
        return sample(PriorOnly, priors, config, seed);
    }
    let target = Spatial {
        data,
        points,
        graph,
        provider,
        covariates: None,
        beta: Vec::new(),
        sigma2: 1.0,
        resid: data.to_vec(),
        candidate: None,
        current: None,
    };
    sample(target, priors, config, seed)
}

/// Hierarchical mode: `Z = X beta + w`, with Gibbs steps for `beta` and `sigma2`
/// after each Metropolis sweep. Rows of `covariates` follow original site indices.
#[allow(clippy::too_many_arguments)]
pub fn run_mcmc_with_covariates(
    data: &[f64],
    covariates: &DMatrix<f64>,
    points: &[Point],
    graph: &OrderedNeighborGraph,
    provider: &dyn KrigingProvider,
    priors: &PriorSpec,
    config: &McmcConfig,
    seed: u64,
) -> Result<Chain> {
    check_inputs(data, points, graph)?;
    if covariates.nrows() != data.len() {
        return Err(Error::DimensionMismatch { expected: data.len(), got: covariates.nrows() });
    }
    // least-squares start
    let xtx = covariates.transpose() * covariates;
    let xtz = covariates.transpose() * nalgebra::DVector::from_column_slice(data);
    let beta: Vec<f64> = xtx
        .cholesky()
        .ok_or_else(|| Error::Numerical("covariate matrix is rank deficient".into()))?
        .solve(&xtz)
        .iter()
        .copied()
        .collect();
    let mut target = Spatial {
        data,
        points,
        graph,
        provider,
        covariates: Some(covariates),
        beta,
        sigma2: 1.0,
        resid: data.to_vec(),
        candidate: None,
        current: None,
    };
    target.refresh_resid();
    let n = data.len() as f64;
    target.sigma2 = (target.resid.iter().map(|e| e * e).sum::<f64>() / n).max(1e-8);
    sample(target, priors, config, seed)
}

/// MH on a caller-supplied log-likelihood; used by the sampler tests.
pub fn run_mcmc_closure<F: FnMut(&CovarianceParams) -> f64>(
    loglik: F,
    priors: &PriorSpec,
    config: &McmcConfig,
    seed: u64,
) -> Result<Chain> {
    sample(Closure(loglik), priors, config, seed)
}

fn check_inputs(data: &[f64], points: &[Point], graph: &OrderedNeighborGraph) -> Result<()> {
    if data.len() != graph.len() {
        return Err(Error::DimensionMismatch { expected: graph.len(), got: data.len() });
    }
    if points.len() != graph.len() {
        return Err(Error::DimensionMismatch { expected: graph.len(), got: points.len() });
    }
    Ok(())
}

/// `Ok(None)` for candidates rejected by the provider rather than by the target.
fn evaluate<T: Target>(target: &mut T, x: &[f64; 3], priors: &PriorSpec, k: usize, chain: &mut Chain) -> Result<Option<f64>> {
    let theta = CovarianceParams { phi: x[0], nu: x[1], r: inv_logit(x[2]) };
    match target.loglik(&theta) {
        Ok(ll) => Ok(Some(ll + log_prior_rl(x[0], x[1], x[2], priors))),
        Err(Error::OutOfEnvelope { .. }) => {
            chain.envelope_rejections[k] += 1;
            Ok(None)
        }
        Err(Error::NotPositiveDefinite { .. }) => {
            chain.numerical_rejections[k] += 1;
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn sample<T: Target>(mut target: T, priors: &PriorSpec, config: &McmcConfig, seed: u64) -> Result<Chain> {
    priors.validate()?;
    config.validate()?;
    let init = config.init.unwrap_or_else(|| default_init(priors, &ParamBounds::TRAINING_ENVELOPE));
    init.validate()?;
    if !(init.r > 0.0 && init.r < 1.0) {
        return Err(Error::InvalidArgument(format!("initial r must lie in (0, 1), got {}", init.r)));
    }
    let mut rng = rng_from_seed(seed);
    let mut x = [init.phi, init.nu, logit(init.r)];
    let mut tune = config.tune;
    let n = config.iterations;
    let mut chain = Chain {
        phi: Vec::with_capacity(n),
        nu: Vec::with_capacity(n),
        rl: Vec::with_capacity(n),
        log_post: Vec::with_capacity(n),
        bins: Vec::with_capacity(n),
        accepted: Vec::with_capacity(n),
        burn_in: config.burn_in,
        ..Default::default()
    };
    let hierarchical = target.extras().is_some();
    if hierarchical {
        chain.sigma2 = Some(Vec::with_capacity(n));
        chain.beta = Some(Vec::with_capacity(n));
    }
    let start = Instant::now();
    let mut lp = match evaluate(&mut target, &x, priors, 0, &mut chain)? {
        Some(v) if v.is_finite() => v,
        _ => {
            return Err(Error::InvalidArgument(format!(
                "log posterior is not finite at the initial point {init:?}"
            )))
        }
    };
    chain.envelope_rejections = [0; 3];
    chain.numerical_rejections = [0; 3];
    target.commit();
    for it in 0..n {
        let mut acc = [false; 3];
        for k in 0..3 {
            let step: f64 = StandardNormal.sample(&mut rng);
            let u: f64 = rng.random();
            let mut cand = x;
            let hastings = if k < 2 {
                cand[k] = (x[k].ln() + tune[k] * step).exp();
                cand[k].ln() - x[k].ln()
            } else {
                cand[k] = x[k] + tune[k] * step;
                0.0
            };
            if let Some(lp_cand) = evaluate(&mut target, &cand, priors, k, &mut chain)? {
                let log_alpha = lp_cand - lp + hastings;
                // NaN candidates are never accepted
                if log_alpha >= 0.0 || u.ln() < log_alpha {
                    x = cand;
                    lp = lp_cand;
                    acc[k] = true;
                    chain.accept_counts[k] += 1;
                    target.commit();
                }
            }
        }
        if let Some(ll) = target.gibbs(priors, &mut rng)? {
            lp = ll + log_prior_rl(x[0], x[1], x[2], priors);
        }
        if config.adapt && it < config.burn_in {
            let gain = 1.0 / ((it + 1) as f64).powf(0.6);
            for k in 0..3 {
                let a = if acc[k] { 1.0 } else { 0.0 };
                tune[k] = (tune[k].ln() + gain * (a - 0.44)).exp().clamp(1e-4, 5.0);
            }
        }
        chain.phi.push(x[0]);
        chain.nu.push(x[1]);
        chain.rl.push(x[2]);
        chain.log_post.push(lp);
        chain.bins.push(target.bin(inv_logit(x[2])));
        chain.accepted.push(acc);
        if let Some((s2, beta)) = target.extras() {
            chain.sigma2.as_mut().unwrap().push(s2);
            chain.beta.as_mut().unwrap().push(beta);
        }
    }
    chain.tune = tune;
    chain.sampling_seconds = start.elapsed().as_secs_f64();
    Ok(chain)
}
