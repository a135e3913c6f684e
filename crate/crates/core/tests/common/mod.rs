//! Brute-force oracles shared by the integration tests. Nothing here calls
//! the estimators under test.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// VaR and CVaR by ascending sort, with the tail size `ceil(n (den - num) / den)`
/// computed in integers for `alpha = num / den`.
pub fn empirical_oracle(losses: &[f64], num: u64, den: u64) -> (f64, f64) {
    let n = losses.len() as u64;
    let k = ((den - num) * n).div_ceil(den).clamp(1, n) as usize;
    let mut sorted = losses.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let var = sorted[sorted.len() - k];
    let mut sum = 0.0;
    for x in sorted.iter().rev().take(k) {
        sum += *x;
    }
    let cvar = sum / k as f64;
    (var, if cvar < var { var } else { cvar })
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normals(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    // Box-Muller, independent of rand_distr.
    (0..n)
        .map(|_| {
            let u1: f64 = 1.0 - rng.random::<f64>();
            let u2: f64 = rng.random::<f64>();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn lag1_autocorr(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let num: f64 = xs.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
    let den: f64 = xs.iter().map(|x| (x - m).powi(2)).sum();
    num / den
}

pub fn excess_kurtosis(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / xs.len() as f64;
    m4 / (m2 * m2) - 3.0
}

/// Composite Simpson on `[a, b]` with `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Smallest `x` in `[lo, hi]` with `cdf(x) >= p`, by bisection.
pub fn quantile_by_bisection(cdf: impl Fn(f64) -> f64, p: f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) >= p {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-15 * hi.abs().max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// `VaR + (1 / (1 - alpha)) * integral of the survival function above VaR`.
///
/// `scale` sets the substitution `x = VaR + scale (e^y - 1)` used for
/// unbounded tails; `upper` is the right end point of the support, if any.
pub fn tail_cvar_by_integration(
    survival: impl Fn(f64) -> f64,
    var: f64,
    alpha: f64,
    scale: f64,
    upper: Option<f64>,
) -> f64 {
    let integral = match upper {
        Some(end) => simpson(&survival, var, end, 200_000),
        None => {
            let y_max = (1e200f64 / scale).ln();
            simpson(|y| survival(var + scale * (y.exp() - 1.0)) * scale * y.exp(), 0.0, y_max, 400_000)
        }
    };
    var + integral / (1.0 - alpha)
}

/// Survival function of the generalized Pareto excess distribution.
pub fn gpd_survival(z: f64, beta: f64, xi: f64) -> f64 {
    if z <= 0.0 {
        return 1.0;
    }
    if xi.abs() < 1e-12 {
        return (-z / beta).exp();
    }
    let t = 1.0 + xi * z / beta;
    if t <= 0.0 {
        0.0
    } else {
        t.powf(-1.0 / xi)
    }
}

pub fn gev_cdf(x: f64, mu: f64, sigma: f64, xi: f64) -> f64 {
    let z = (x - mu) / sigma;
    if xi.abs() < 1e-12 {
        return (-(-z).exp()).exp();
    }
    let t = 1.0 + xi * z;
    if t <= 0.0 {
        return if xi > 0.0 { 0.0 } else { 1.0 };
    }
    (-t.powf(-1.0 / xi)).exp()
}

/// AR(1) path `x_t = phi x_{t-1} + e_t` with standard normal shocks.
pub fn ar1(phi: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    let shocks = normals(&mut r, n);
    let mut out = Vec::with_capacity(n);
    let mut x = 0.0;
    for e in shocks {
        x = phi * x + e;
        out.push(x);
    }
    out
}

/// `1 - F(x)` for the GEV, kept accurate when `F(x)` is close to 1.
pub fn gev_survival(x: f64, mu: f64, sigma: f64, xi: f64) -> f64 {
    let z = (x - mu) / sigma;
    let t = if xi.abs() < 1e-12 {
        (-z).exp()
    } else {
        let base = 1.0 + xi * z;
        if base <= 0.0 {
            return if xi > 0.0 { 1.0 } else { 0.0 };
        }
        base.powf(-1.0 / xi)
    };
    -(-t).exp_m1()
}
