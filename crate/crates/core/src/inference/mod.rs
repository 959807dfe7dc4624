//! Parameter estimation: priors, the Metropolis-Hastings sampler, the variogram
//! initializer with a bounded quasi-Newton maximizer, and the conjugate updates of
//! the hierarchical trend model.

pub mod conjugate;
mod ess;
pub mod mcmc;
pub mod mle;
mod prior;
pub mod variogram;

pub use conjugate::{beta_posterior, decorrelate, sigma2_posterior, update_beta, update_sigma2, Decorrelated};
pub use ess::{ess, EssEstimate};
pub use mle::{fit_mle, fit_mle_surrogate, maximize, MleConfig, MleResult};
pub use prior::{gamma_logpdf, inv_logit, log_prior, logit, lognormal_logpdf, normal_logpdf, PriorSpec};
pub use mcmc::{run_mcmc, run_mcmc_closure, run_mcmc_with_covariates, Chain, ChainSummary, McmcConfig, ParamSummary};
pub use variogram::{empirical_variogram, fit_variogram, VariogramBin, VariogramConfig, VariogramFit};
