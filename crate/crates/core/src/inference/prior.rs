use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{ln_gamma, CovarianceParams};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Gamma (shape, rate) on `phi`, LogNormal on `nu`, Normal on `r_L = logit r`, plus
/// the priors of the hierarchical mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub phi_shape: f64,
    pub phi_rate: f64,
    pub nu_log_mean: f64,
    pub nu_log_sd: f64,
    pub rl_mean: f64,
    pub rl_sd: f64,
    /// Variance of the zero-mean Normal prior on each regression coefficient.
    pub beta_var: f64,
    /// Inverse-Gamma shape and rate on `sigma2`.
    pub sigma2_a: f64,
    pub sigma2_b: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            phi_shape: 1.5,
            phi_rate: 30.0,
            nu_log_mean: 0.5,
            nu_log_sd: 0.5,
            rl_mean: 0.0,
            rl_sd: 1.0,
            beta_var: 100.0,
            sigma2_a: 0.1,
            sigma2_b: 0.1,
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("phi_shape", self.phi_shape),
            ("phi_rate", self.phi_rate),
            ("nu_log_sd", self.nu_log_sd),
            ("rl_sd", self.rl_sd),
            ("beta_var", self.beta_var),
            ("sigma2_a", self.sigma2_a),
            ("sigma2_b", self.sigma2_b),
        ];
        for (name, v) in all {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("prior {name} must be > 0, got {v}")));
            }
        }
        if !self.nu_log_mean.is_finite() || !self.rl_mean.is_finite() {
            return Err(Error::InvalidArgument("prior locations must be finite".into()));
        }
        Ok(())
    }
}

pub fn logit(r: f64) -> f64 {
    (r / (1.0 - r)).ln()
}

pub fn inv_logit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn gamma_logpdf(x: f64, shape: f64, rate: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

pub fn normal_logpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - LN_SQRT_2PI
}

pub fn lognormal_logpdf(x: f64, log_mean: f64, log_sd: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    normal_logpdf(x.ln(), log_mean, log_sd) - x.ln()
}

/// Log prior density of `(phi, nu, r_L)`. The `r` term is the Normal density of
/// `logit r`, with no Jacobian, because the chain moves on `r_L`.
pub fn log_prior(theta: &CovarianceParams, priors: &PriorSpec) -> Result<f64> {
    if !(theta.r > 0.0 && theta.r < 1.0) {
        return Err(Error::InvalidArgument(format!("r must lie in (0, 1), got {}", theta.r)));
    }
    Ok(log_prior_rl(theta.phi, theta.nu, logit(theta.r), priors))
}

pub(crate) fn log_prior_rl(phi: f64, nu: f64, rl: f64, p: &PriorSpec) -> f64 {
    gamma_logpdf(phi, p.phi_shape, p.phi_rate)
        + lognormal_logpdf(nu, p.nu_log_mean, p.nu_log_sd)
        + normal_logpdf(rl, p.rl_mean, p.rl_sd)
}
