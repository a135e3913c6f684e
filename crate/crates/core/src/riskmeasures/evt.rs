//! Peaks-over-threshold (GPD) and block-maxima (GEV) tail models, fitted by
//! derivative-free maximum likelihood.

use serde::{Deserialize, Serialize};

use super::{check_alpha, mean_std, RiskEstimate, RiskMethod};
use crate::error::{Error, Result};
use crate::optim::{gauss_legendre, NelderMead};

pub const MIN_EXCEEDANCES: usize = 20;
pub const MIN_GEV_BLOCKS: usize = 20;
pub const DEFAULT_GPD_THRESHOLD_QUANTILE: f64 = 0.95;

const SHAPE_MIN: f64 = -0.5;
const SHAPE_MAX: f64 = 1.0;
const ZERO_SHAPE: f64 = 1e-6;
const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpdFit {
    pub threshold: f64,
    pub scale: f64,
    pub shape: f64,
    pub n_total: usize,
    pub n_exc: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GevFit {
    pub location: f64,
    pub scale: f64,
    pub shape: f64,
    pub block_size: usize,
    pub n_blocks: usize,
}

/// Comparison against an alternative closed form that is commonly quoted
/// for the same quantity. `variant` is that form's value; `disagrees` is set
/// when it differs from the value actually reported.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VariantCheck {
    pub variant: f64,
    pub disagrees: bool,
}

impl VariantCheck {
    fn new(variant: f64, reported: f64) -> Self {
        let disagrees = !((variant - reported).abs() <= 1e-9 * reported.abs().max(1.0));
        Self { variant, disagrees }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TailEstimate {
    pub estimate: RiskEstimate,
    pub check: VariantCheck,
}

fn shape_feasible(xi: f64) -> bool {
    xi > SHAPE_MIN && xi < SHAPE_MAX
}

fn gpd_neg_loglik(y: &[f64], log_scale: f64, xi: f64) -> f64 {
    if !shape_feasible(xi) || !log_scale.is_finite() {
        return f64::INFINITY;
    }
    let beta = log_scale.exp();
    let n = y.len() as f64;
    if xi == 0.0 {
        return n * log_scale + y.iter().sum::<f64>() / beta;
    }
    let mut acc = 0.0;
    for &v in y {
        let t = xi * v / beta;
        if t <= -1.0 {
            return f64::INFINITY;
        }
        acc += t.ln_1p();
    }
    n * log_scale + (1.0 + 1.0 / xi) * acc
}

fn best_of(starts: &[Vec<f64>], steps: &[f64], f: impl Fn(&[f64]) -> f64) -> Result<Vec<f64>> {
    let nm = NelderMead::default();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut iterations = 0;
    for s in starts {
        let m = nm.minimize(&f, s, steps);
        iterations = iterations.max(m.iterations);
        if m.converged && m.value.is_finite() && best.as_ref().is_none_or(|(v, _)| m.value < *v) {
            best = Some((m.value, m.x));
        }
    }
    best.map(|(_, x)| x).ok_or(Error::NonConvergence { iterations })
}

/// Lower empirical quantile: the `ceil(q N)`-th smallest value.
fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let x = q * n as f64;
    let r = x.round();
    let rank = if (x - r).abs() <= 1e-9 * r.max(1.0) { r } else { x.ceil() };
    sorted[(rank as usize).clamp(1, n) - 1]
}

/// Fits a GPD to exceedances over the empirical `threshold_quantile` of
/// `losses`. The shape is restricted to `(-0.5, 1)`; the best of three
/// Nelder-Mead runs (moment, exponential and probability-weighted-moment
/// starting points) is kept.
pub fn fit_gpd(losses: &[f64], threshold_quantile: f64) -> Result<GpdFit> {
    if !(threshold_quantile > 0.0 && threshold_quantile < 1.0) {
        return Err(Error::InvalidConfig("threshold quantile outside (0, 1)".into()));
    }
    if losses.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("losses"));
    }
    if losses.is_empty() {
        return Err(Error::EmptyInput("losses"));
    }
    let mut sorted = losses.to_vec();
    sorted.sort_by(f64::total_cmp);
    let u = empirical_quantile(&sorted, threshold_quantile);
    let y: Vec<f64> = sorted.iter().filter(|&&x| x > u).map(|&x| x - u).collect();
    if y.len() < MIN_EXCEEDANCES {
        return Err(Error::TooFewExceedances { found: y.len(), required: MIN_EXCEEDANCES });
    }

    let (mean, sd) = mean_std(&y);
    let ratio = mean * mean / (sd * sd).max(f64::MIN_POSITIVE);
    let clip = |xi: f64| if xi.is_finite() { xi.clamp(-0.45, 0.9) } else { 0.0 };
    let pos = |b: f64| if b.is_finite() && b > 0.0 { b } else { mean };

    let mom = (pos(0.5 * mean * (ratio + 1.0)), clip(0.5 * (1.0 - ratio)));
    let n = y.len() as f64;
    let a1 = y.iter().enumerate().map(|(i, v)| (1.0 - (i as f64 + 0.65) / n) * v).sum::<f64>() / n;
    let denom = mean - 2.0 * a1;
    let pwm = (pos(2.0 * mean * a1 / denom), clip(2.0 - mean / denom));
    let starts = [vec![mom.0.ln(), mom.1], vec![mean.ln(), 0.0], vec![pwm.0.ln(), pwm.1]];
    let x = best_of(&starts, &[0.2, 0.1], |p| gpd_neg_loglik(&y, p[0], p[1]))?;
    Ok(GpdFit { threshold: u, scale: x[0].exp(), shape: x[1], n_total: losses.len(), n_exc: y.len() })
}

/// POT VaR `u + (beta/xi) (((N/n)(1-alpha))^(-xi) - 1)` and CVaR
/// `VaR/(1-xi) + (beta - xi u)/(1-xi)`.
///
/// The check compares against `VaR/(1-xi) + (beta - u)/(1-xi)`, which only
/// coincides when `u = 0` or `xi = 1`.
pub fn gpd_var_cvar(fit: &GpdFit, alpha: f64) -> Result<TailEstimate> {
    check_alpha(alpha)?;
    let (u, beta, xi) = (fit.threshold, fit.scale, fit.shape);
    if xi >= 1.0 {
        return Err(Error::InfiniteMean(xi));
    }
    if !(beta > 0.0) || fit.n_exc < 1 || fit.n_exc > fit.n_total {
        return Err(Error::InvalidConfig("invalid GPD fit".into()));
    }
    let tail_prob = fit.n_exc as f64 / fit.n_total as f64;
    if 1.0 - alpha > tail_prob {
        return Err(Error::InvalidConfig(format!(
            "alpha {alpha} does not exceed the threshold level {}",
            1.0 - tail_prob
        )));
    }
    let level = (1.0 - alpha) / tail_prob;
    let var = if xi.abs() < ZERO_SHAPE { u - beta * level.ln() } else { u + beta / xi * (level.powf(-xi) - 1.0) };
    let cvar = var / (1.0 - xi) + (beta - xi * u) / (1.0 - xi);
    let variant = var / (1.0 - xi) + (beta - u) / (1.0 - xi);
    Ok(TailEstimate {
        estimate: RiskEstimate {
            var,
            cvar: cvar.max(var),
            alpha,
            tau_steps: 1,
            method: RiskMethod::Gpd,
            n_obs: fit.n_total,
        },
        check: VariantCheck::new(variant, cvar),
    })
}

fn gev_neg_loglik(x: &[f64], mu: f64, log_scale: f64, xi: f64) -> f64 {
    if !shape_feasible(xi) || !log_scale.is_finite() || !mu.is_finite() {
        return f64::INFINITY;
    }
    let sigma = log_scale.exp();
    let n = x.len() as f64;
    let mut acc = n * log_scale;
    if xi.abs() < 1e-12 {
        for &v in x {
            let z = (v - mu) / sigma;
            acc += z + (-z).exp();
        }
        return acc;
    }
    for &v in x {
        let t = xi * (v - mu) / sigma;
        if t <= -1.0 {
            return f64::INFINITY;
        }
        let lt = t.ln_1p();
        acc += (1.0 + 1.0 / xi) * lt + (-lt / xi).exp();
    }
    acc
}

/// Fits a GEV to maxima of consecutive non-overlapping blocks of
/// `block_size` losses; a trailing partial block is dropped.
pub fn fit_gev(losses: &[f64], block_size: usize) -> Result<GevFit> {
    if block_size < 1 {
        return Err(Error::InvalidConfig("block size must be >= 1".into()));
    }
    if losses.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("losses"));
    }
    let maxima: Vec<f64> =
        losses.chunks_exact(block_size).map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
    if maxima.len() < MIN_GEV_BLOCKS {
        return Err(Error::TooFewBlocks { found: maxima.len(), required: MIN_GEV_BLOCKS });
    }
    let (mean, sd) = mean_std(&maxima);
    let sigma = (sd * 6f64.sqrt() / std::f64::consts::PI).max(1e-12);
    let mu = mean - EULER_GAMMA * sigma;
    let starts: Vec<Vec<f64>> = [0.0, 0.2, -0.2].iter().map(|&xi| vec![mu, sigma.ln(), xi]).collect();
    let x = best_of(&starts, &[0.2 * sigma, 0.2, 0.1], |p| gev_neg_loglik(&maxima, p[0], p[1], p[2]))?;
    Ok(GevFit { location: x[0], scale: x[1].exp(), shape: x[2], block_size, n_blocks: maxima.len() })
}

/// GEV quantile at probability `1 - upper`, written in terms of the upper
/// tail mass so that values near 1 keep full precision.
fn gev_quantile_upper(fit: &GevFit, upper: f64) -> f64 {
    let w = -(-upper).ln_1p();
    if fit.shape.abs() < ZERO_SHAPE {
        fit.location - fit.scale * w.ln()
    } else {
        fit.location + fit.scale / fit.shape * (w.powf(-fit.shape) - 1.0)
    }
}

/// GEV VaR by inverting the distribution function at `alpha`, and CVaR as
/// the mean of the quantile function over `[alpha, 1)`.
///
/// The check carries `mu + (sigma/xi)((-ln(1-alpha))^(-xi) - 1)` for
/// comparison with VaR.
pub fn gev_var_cvar(fit: &GevFit, alpha: f64) -> Result<TailEstimate> {
    check_alpha(alpha)?;
    if fit.shape >= 1.0 {
        return Err(Error::InfiniteMean(fit.shape));
    }
    if !(fit.scale > 0.0) {
        return Err(Error::InvalidConfig("GEV scale must be > 0".into()));
    }
    let tail = 1.0 - alpha;
    let var = gev_quantile_upper(fit, tail);

    // Substituting p = 1 - tail * exp(-s) maps [alpha, 1) to [0, inf) and
    // the averaged integral to int_0^inf Q(1 - tail e^-s) e^-s ds.
    let decay = 1.0 - fit.shape.max(0.0);
    let s_max = (45.0 / decay).ceil();
    let integrand = |s: f64| gev_quantile_upper(fit, tail * (-s).exp()) * (-s).exp();
    let cvar = gauss_legendre(integrand, 0.0, s_max, s_max as usize * 2);

    let variant = if fit.shape.abs() < ZERO_SHAPE {
        fit.location - fit.scale * (-(tail.ln())).ln()
    } else {
        fit.location + fit.scale / fit.shape * ((-(tail.ln())).powf(-fit.shape) - 1.0)
    };
    Ok(TailEstimate {
        estimate: RiskEstimate {
            var,
            cvar: cvar.max(var),
            alpha,
            tau_steps: 1,
            method: RiskMethod::Gev,
            n_obs: fit.n_blocks * fit.block_size,
        },
        check: VariantCheck::new(variant, var),
    })
}
