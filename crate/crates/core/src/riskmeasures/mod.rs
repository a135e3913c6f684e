//! VaR and CVaR estimators.
//!
//! Losses are positive numbers (a gain is a negative loss). Every estimator
//! returns a [`RiskEstimate`] with `cvar >= var`.

mod evt;

pub use evt::{
    fit_gev, fit_gpd, gev_var_cvar, gpd_var_cvar, GevFit, GpdFit, TailEstimate, VariantCheck,
    DEFAULT_GPD_THRESHOLD_QUANTILE, MIN_EXCEEDANCES, MIN_GEV_BLOCKS,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::bootstrap::ScenarioSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskMethod {
    Empirical,
    Normal,
    Gpd,
    Gev,
    #[serde(rename = "mc")]
    MonteCarlo,
}

impl RiskMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            RiskMethod::Empirical => "empirical",
            RiskMethod::Normal => "normal",
            RiskMethod::Gpd => "gpd",
            RiskMethod::Gev => "gev",
            RiskMethod::MonteCarlo => "mc",
        }
    }
}

impl fmt::Display for RiskMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RiskMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "empirical" => Ok(RiskMethod::Empirical),
            "normal" => Ok(RiskMethod::Normal),
            "gpd" => Ok(RiskMethod::Gpd),
            "gev" => Ok(RiskMethod::Gev),
            "mc" => Ok(RiskMethod::MonteCarlo),
            other => Err(Error::InvalidConfig(format!("unknown risk method `{other}`"))),
        }
    }
}

/// Confidence level plus the horizon a measure refers to and the sampling
/// interval its losses were observed at.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskSpec {
    pub alpha: f64,
    pub tau_steps: usize,
    pub base_steps: usize,
}

impl RiskSpec {
    pub fn new(alpha: f64, tau_steps: usize, base_steps: usize) -> Result<Self> {
        check_alpha(alpha)?;
        if tau_steps < 1 || base_steps < 1 {
            return Err(Error::InvalidConfig("horizon steps must be >= 1".into()));
        }
        Ok(Self { alpha, tau_steps, base_steps })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub var: f64,
    pub cvar: f64,
    pub alpha: f64,
    pub tau_steps: usize,
    pub method: RiskMethod,
    pub n_obs: usize,
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("alpha {alpha} outside (0, 1)")))
    }
}

/// Number of tail observations `ceil((1 - alpha) * n)`, clamped to `[1, n]`.
///
/// Products within 1e-9 of an integer are snapped to it so that, e.g.,
/// `alpha = 0.95, n = 100` gives 5 rather than 6.
pub fn tail_count(alpha: f64, n: usize) -> usize {
    let x = (1.0 - alpha) * n as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * r.max(1.0) { r } else { x.ceil() };
    (k as usize).clamp(1, n.max(1))
}

/// Historical-simulation VaR and CVaR.
///
/// With `k = tail_count(alpha, T)`, VaR is the k-th largest loss and CVaR
/// the mean of the k largest, summed from the largest down. Ties keep their
/// input order (stable descending sort).
pub fn empirical_var_cvar(losses: &[f64], alpha: f64) -> Result<RiskEstimate> {
    check_alpha(alpha)?;
    if losses.is_empty() {
        return Err(Error::EmptyInput("losses"));
    }
    if losses.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("losses"));
    }
    let mut sorted = losses.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = tail_count(alpha, sorted.len());
    let var = sorted[k - 1];
    let mut sum = 0.0;
    for x in &sorted[..k] {
        sum += x;
    }
    let cvar = (sum / k as f64).max(var);
    Ok(RiskEstimate { var, cvar, alpha, tau_steps: 1, method: RiskMethod::Empirical, n_obs: losses.len() })
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

/// Variance-covariance VaR `mu + sigma z` and CVaR
/// `mu + sigma phi(z) / (1 - alpha)` with `z` the standard normal quantile.
pub fn normal_var_cvar(mu: f64, sigma: f64, alpha: f64) -> Result<RiskEstimate> {
    check_alpha(alpha)?;
    if !(sigma >= 0.0) || !mu.is_finite() || !sigma.is_finite() {
        return Err(Error::InvalidConfig("sigma must be finite and >= 0".into()));
    }
    let n = std_normal();
    let z = n.inverse_cdf(alpha);
    let var = mu + sigma * z;
    let cvar = (mu + sigma * n.pdf(z) / (1.0 - alpha)).max(var);
    Ok(RiskEstimate { var, cvar, alpha, tau_steps: 1, method: RiskMethod::Normal, n_obs: 0 })
}

/// Sample mean and (n-1) standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Rescales var and cvar by `sqrt(target / current)` steps.
pub fn scale_horizon(est: &RiskEstimate, target_steps: usize) -> Result<RiskEstimate> {
    if target_steps < 1 || est.tau_steps < 1 {
        return Err(Error::InvalidConfig("horizon steps must be >= 1".into()));
    }
    if target_steps == est.tau_steps {
        return Ok(*est);
    }
    let factor = (target_steps as f64 / est.tau_steps as f64).sqrt();
    Ok(RiskEstimate { var: est.var * factor, cvar: est.cvar * factor, tau_steps: target_steps, ..*est })
}

/// Scenario-panel VaR/CVaR: the portfolio return of scenario `j` is
/// `sum_a w_a * (prod_s (1 + r_{a,j,s}) - 1)` and the loss is its negation.
pub fn monte_carlo_var_cvar(panel: &ScenarioSet, weights: &[f64], alpha: f64) -> Result<RiskEstimate> {
    if weights.len() != panel.n_assets() {
        return Err(Error::DimensionMismatch(format!("{} weights for {} assets", weights.len(), panel.n_assets())));
    }
    let losses: Vec<f64> = (0..panel.m)
        .map(|j| -weights.iter().enumerate().map(|(a, w)| w * panel.compounded(a, j)).sum::<f64>())
        .collect();
    let est = empirical_var_cvar(&losses, alpha)?;
    Ok(RiskEstimate { method: RiskMethod::MonteCarlo, tau_steps: panel.tau_steps, ..est })
}
