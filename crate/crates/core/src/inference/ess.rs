use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EssEstimate {
    pub ess: f64,
    /// Set for chains with zero variance; `ess` is then 1.
    pub degenerate: bool,
}

/// Effective sample size by Geyer's initial positive sequence: autocovariances are
/// summed in adjacent pairs until a pair sum is no longer positive. The result is
/// capped at the number of draws.
pub fn ess(draws: &[f64]) -> EssEstimate {
    let n = draws.len();
    if n < 2 {
        return EssEstimate { ess: n as f64, degenerate: n == 0 };
    }
    let mean = draws.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = draws.iter().map(|x| x - mean).collect();
    let autocov = |lag: usize| -> f64 {
        centered[..n - lag]
            .iter()
            .zip(&centered[lag..])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / n as f64
    };
    let g0 = autocov(0);
    let spread = draws.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
        - draws.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if !(g0 > 0.0) || spread <= 4.0 * f64::EPSILON * mean.abs() {
        return EssEstimate { ess: 1.0, degenerate: true };
    }
    let mut sum = 0.0;
    let mut k = 0;
    while 2 * k + 1 < n {
        let pair = autocov(2 * k) + autocov(2 * k + 1);
        if pair <= 0.0 {
            break;
        }
        sum += pair;
        k += 1;
    }
    let tau = (-g0 + 2.0 * sum) / g0;
    let ess = if tau > 0.0 { n as f64 / tau } else { n as f64 };
    EssEstimate { ess: ess.min(n as f64), degenerate: false }
}
