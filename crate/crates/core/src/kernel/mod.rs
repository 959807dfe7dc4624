//! Matérn correlation and small correlation matrices.
//!
//! The kernel is `K(d) = x^nu K_nu(x) / (Gamma(nu) 2^(nu-1))` with `x = d / phi`,
//! without the `sqrt(2 nu)` rescaling some texts apply to the distance.

mod bessel;

pub use bessel::{bessel_k, ln_gamma, BesselK};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::{dist, Point};

/// Scaled lags below this return correlation exactly 1.
pub const ZERO_LAG: f64 = 1e-12;

/// Default size limit for dense correlation matrices.
pub const DEFAULT_DENSE_CAP: usize = 2_048;

/// Range, smoothness and proportion of spatial variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceParams {
    pub phi: f64,
    pub nu: f64,
    pub r: f64,
}

impl CovarianceParams {
    pub fn new(phi: f64, nu: f64, r: f64) -> Result<Self> {
        let theta = Self { phi, nu, r };
        theta.validate()?;
        Ok(theta)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.phi > 0.0) || !self.phi.is_finite() {
            return Err(Error::InvalidArgument(format!("phi must be > 0, got {}", self.phi)));
        }
        if !(self.nu > 0.0) || !self.nu.is_finite() {
            return Err(Error::InvalidArgument(format!("nu must be > 0, got {}", self.nu)));
        }
        if !(0.0..=1.0).contains(&self.r) {
            return Err(Error::InvalidArgument(format!("r must lie in [0, 1], got {}", self.r)));
        }
        Ok(())
    }
}

/// Marginal mean and variance on top of the correlation parameters, plus optional
/// regression coefficients for the hierarchical trend model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullParams {
    pub mu: f64,
    pub sigma2: f64,
    pub theta: CovarianceParams,
    pub beta: Option<Vec<f64>>,
}

impl FullParams {
    /// Standardized process: mean 0, variance 1.
    pub fn standard(theta: CovarianceParams) -> Self {
        Self {
            mu: 0.0,
            sigma2: 1.0,
            theta,
            beta: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0) || !self.sigma2.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "sigma2 must be > 0, got {}",
                self.sigma2
            )));
        }
        self.theta.validate()
    }
}

/// Closed box on `(phi, nu, r)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamBounds {
    pub phi: (f64, f64),
    pub nu: (f64, f64),
    pub r: (f64, f64),
}

impl ParamBounds {
    /// The region the surrogate networks are trained to cover.
    pub const TRAINING_ENVELOPE: ParamBounds = ParamBounds {
        phi: (0.005, 0.12),
        nu: (0.3, 2.7),
        r: (0.18, 0.99),
    };

    pub fn check(&self, theta: &CovarianceParams) -> Result<()> {
        let check = |name: &'static str, value: f64, (lo, hi): (f64, f64)| {
            if value >= lo && value <= hi {
                Ok(())
            } else {
                Err(Error::OutOfEnvelope { name, value, lo, hi })
            }
        };
        check("phi", theta.phi, self.phi)?;
        check("nu", theta.nu, self.nu)?;
        check("r", theta.r, self.r)
    }

    pub fn contains(&self, theta: &CovarianceParams) -> bool {
        self.check(theta).is_ok()
    }

    pub fn clamp(&self, theta: &CovarianceParams) -> CovarianceParams {
        CovarianceParams {
            phi: theta.phi.clamp(self.phi.0, self.phi.1),
            nu: theta.nu.clamp(self.nu.0, self.nu.1),
            r: theta.r.clamp(self.r.0, self.r.1),
        }
    }

    pub fn lower(&self) -> [f64; 3] {
        [self.phi.0, self.nu.0, self.r.0]
    }

    pub fn upper(&self) -> [f64; 3] {
        [self.phi.1, self.nu.1, self.r.1]
    }
}

/// Matérn correlation with the order-dependent constants computed once.
#[derive(Debug, Clone, Copy)]
pub struct Matern {
    phi: f64,
    nu: f64,
    bessel: BesselK,
    log_norm: f64,
}

impl Matern {
    pub fn new(phi: f64, nu: f64) -> Result<Self> {
        if !(phi > 0.0) || !(nu > 0.0) || !phi.is_finite() || !nu.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "Matérn needs phi > 0 and nu > 0, got phi={phi}, nu={nu}"
            )));
        }
        Ok(Self {
            phi,
            nu,
            bessel: BesselK::new(nu)?,
            log_norm: -ln_gamma(nu) - (nu - 1.0) * std::f64::consts::LN_2,
        })
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    /// Correlation at distance `d >= 0`.
    #[inline]
    pub fn corr(&self, d: f64) -> f64 {
        let x = d / self.phi;
        if x < ZERO_LAG {
            return 1.0;
        }
        (self.log_norm + self.nu * x.ln() + self.bessel.ln_eval(x))
            .exp()
            .min(1.0)
    }
}

/// One-off Matérn evaluation.
pub fn matern(d: f64, phi: f64, nu: f64) -> Result<f64> {
    if !(d >= 0.0) {
        return Err(Error::InvalidArgument(format!("distance must be >= 0, got {d}")));
    }
    Ok(Matern::new(phi, nu)?.corr(d))
}

/// `r K + (1 - r) I` for the given points, refusing more than [`DEFAULT_DENSE_CAP`] points.
pub fn corr_matrix(points: &[Point], theta: &CovarianceParams) -> Result<DMatrix<f64>> {
    corr_matrix_capped(points, theta, DEFAULT_DENSE_CAP)
}

pub fn corr_matrix_capped(
    points: &[Point],
    theta: &CovarianceParams,
    cap: usize,
) -> Result<DMatrix<f64>> {
    theta.validate()?;
    let n = points.len();
    if n > cap {
        return Err(Error::InvalidArgument(format!(
            "dense correlation matrix limited to {cap} points, got {n}"
        )));
    }
    let kern = Matern::new(theta.phi, theta.nu)?;
    let mut c = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        for j in 0..i {
            let d = dist(&points[i], &points[j]);
            if d == 0.0 && theta.r >= 1.0 {
                return Err(Error::NotPositiveDefinite {
                    context: format!("points {j} and {i} coincide with r = 1"),
                });
            }
            let v = theta.r * kern.corr(d);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    Ok(c)
}
