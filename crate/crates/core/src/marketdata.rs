//! Historical price loading, return computation and synthetic fixture paths.
//!
//! Returns are simple (`S[i+1] / S[i] - 1`) and dated at the later
//! observation. Calendar gaps are ignored: consecutive rows are one step.

use std::fmt::Write as _;
use std::path::Path;

use chrono::{Duration, NaiveDate};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dated close prices of a single asset.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    asset_id: String,
    dates: Vec<NaiveDate>,
    closes: Vec<f64>,
}

impl PriceSeries {
    /// Validates strictly increasing dates, positive finite closes and a
    /// length of at least two.
    pub fn new(asset_id: impl Into<String>, dates: Vec<NaiveDate>, closes: Vec<f64>) -> Result<Self> {
        if dates.len() != closes.len() {
            return Err(Error::DimensionMismatch(format!("{} dates vs {} closes", dates.len(), closes.len())));
        }
        if closes.len() < 2 {
            return Err(Error::TooFewObservations { found: closes.len(), required: 2 });
        }
        for (i, &c) in closes.iter().enumerate() {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::NonPositivePrice { line: i + 1, value: c });
            }
        }
        for pair in dates.windows(2) {
            if pair[1] == pair[0] {
                return Err(Error::DuplicateDate(pair[1]));
            }
            if pair[1] < pair[0] {
                return Err(Error::InvalidConfig(format!("dates not increasing at {}", pair[1])));
            }
        }
        Ok(Self { asset_id: asset_id.into(), dates, closes })
    }

    pub fn asset_id(&self) -> &str {
        &self.asset_id
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn closes(&self) -> &[f64] {
        &self.closes
    }

    pub fn len(&self) -> usize {
        self.closes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.closes.is_empty()
    }

    /// Sub-series of observations dated in `[start, end]`.
    pub fn window(&self, start: NaiveDate, end: NaiveDate) -> Result<PriceSeries> {
        if start > end {
            return Err(Error::InvalidConfig(format!("window start {start} after end {end}")));
        }
        let lo = self.dates.partition_point(|d| *d < start);
        let hi = self.dates.partition_point(|d| *d <= end);
        if hi <= lo {
            return Err(Error::EmptySelection { start, end });
        }
        PriceSeries::new(self.asset_id.clone(), self.dates[lo..hi].to_vec(), self.closes[lo..hi].to_vec())
    }

    /// Prefix containing every observation dated on or before `cut`.
    pub fn truncate_after(&self, cut: NaiveDate) -> Result<PriceSeries> {
        let hi = self.dates.partition_point(|d| *d <= cut);
        PriceSeries::new(self.asset_id.clone(), self.dates[..hi].to_vec(), self.closes[..hi].to_vec())
    }

    /// Serializes as `date,close` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("date,close\n");
        for (d, c) in self.dates.iter().zip(&self.closes) {
            let _ = writeln!(out, "{},{}", d.format("%Y-%m-%d"), c);
        }
        out
    }
}

/// Simple returns, each dated at the end of its interval.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnSeries {
    asset_id: String,
    dates: Vec<NaiveDate>,
    returns: Vec<f64>,
}

impl ReturnSeries {
    pub fn asset_id(&self) -> &str {
        &self.asset_id
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn values(&self) -> &[f64] {
        &self.returns
    }

    pub fn len(&self) -> usize {
        self.returns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.returns.is_empty()
    }
}

/// Parses `date,close` CSV text. `source` labels the asset.
pub fn parse_csv(text: &str, source: &str) -> Result<PriceSeries> {
    let mut lines = text.lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((_, l)) => break l,
            None => return Err(Error::TooFewObservations { found: 0, required: 2 }),
        }
    };
    if header.trim().trim_start_matches('\u{feff}') != "date,close" {
        return Err(Error::MalformedRow {
            line: 1,
            reason: format!("expected header `date,close`, found `{}`", header.trim()),
        });
    }

    let mut rows: Vec<(NaiveDate, f64, usize)> = Vec::new();
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let (Some(d), Some(c), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(Error::MalformedRow { line: line_no, reason: "expected two fields".into() });
        };
        let date = NaiveDate::parse_from_str(d.trim(), "%Y-%m-%d")
            .map_err(|e| Error::MalformedRow { line: line_no, reason: format!("bad date `{}`: {e}", d.trim()) })?;
        let close: f64 = c
            .trim()
            .parse()
            .map_err(|_| Error::MalformedRow { line: line_no, reason: format!("bad close `{}`", c.trim()) })?;
        if !(close.is_finite() && close > 0.0) {
            return Err(Error::NonPositivePrice { line: line_no, value: close });
        }
        rows.push((date, close, line_no));
    }

    rows.sort_by_key(|r| r.0);
    if let Some(pair) = rows.windows(2).find(|p| p[0].0 == p[1].0) {
        return Err(Error::DuplicateDate(pair[1].0));
    }
    let (dates, closes): (Vec<_>, Vec<_>) = rows.into_iter().map(|(d, c, _)| (d, c)).unzip();
    PriceSeries::new(source, dates, closes)
}

/// Loads a `date,close` CSV file; rows are sorted by date.
pub fn load_csv(path: impl AsRef<Path>) -> Result<PriceSeries> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "asset".into());
    parse_csv(&text, &id)
}

pub fn to_returns(prices: &PriceSeries) -> ReturnSeries {
    let returns = prices.closes.windows(2).map(|w| w[1] / w[0] - 1.0).collect();
    ReturnSeries { asset_id: prices.asset_id.clone(), dates: prices.dates[1..].to_vec(), returns }
}

/// Returns dated in `[start, end]`, order preserved.
pub fn window(series: &ReturnSeries, start: NaiveDate, end: NaiveDate) -> Result<ReturnSeries> {
    if start > end {
        return Err(Error::InvalidConfig(format!("window start {start} after end {end}")));
    }
    let lo = series.dates.partition_point(|d| *d < start);
    let hi = series.dates.partition_point(|d| *d <= end);
    if hi <= lo {
        return Err(Error::EmptySelection { start, end });
    }
    Ok(ReturnSeries {
        asset_id: series.asset_id.clone(),
        dates: series.dates[lo..hi].to_vec(),
        returns: series.returns[lo..hi].to_vec(),
    })
}

/// Rebuilds closes from a starting level by compounding returns.
pub fn compound(start: f64, returns: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(returns.len() + 1);
    let mut level = start;
    out.push(level);
    for r in returns {
        level *= 1.0 + r;
        out.push(level);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticModel {
    Gbm,
    Heston,
}

fn default_s0() -> f64 {
    100.0
}

fn default_start_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid date")
}

/// Parameters of a synthetic price path generator. Rates are per year.
///
/// `sigma` drives GBM; Heston uses `kappa`, `theta`, `nu` (vol of vol),
/// `rho` and the initial variance `v0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub model: SyntheticModel,
    #[serde(default)]
    pub mu: f64,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub kappa: f64,
    #[serde(default)]
    pub theta: f64,
    #[serde(default)]
    pub nu: f64,
    #[serde(default)]
    pub rho: f64,
    #[serde(default)]
    pub v0: f64,
    pub steps: usize,
    pub dt: f64,
    pub seed: u64,
    #[serde(default = "default_s0")]
    pub s0: f64,
    #[serde(default = "default_start_date")]
    pub start_date: NaiveDate,
}

impl SyntheticSpec {
    pub fn gbm(mu: f64, sigma: f64, steps: usize, dt: f64, seed: u64) -> Self {
        Self {
            model: SyntheticModel::Gbm,
            mu,
            sigma,
            kappa: 0.0,
            theta: 0.0,
            nu: 0.0,
            rho: 0.0,
            v0: 0.0,
            steps,
            dt,
            seed,
            s0: default_s0(),
            start_date: default_start_date(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn heston(
        mu: f64,
        kappa: f64,
        theta: f64,
        nu: f64,
        rho: f64,
        v0: f64,
        steps: usize,
        dt: f64,
        seed: u64,
    ) -> Self {
        Self {
            model: SyntheticModel::Heston,
            mu,
            sigma: 0.0,
            kappa,
            theta,
            nu,
            rho,
            v0,
            steps,
            dt,
            seed,
            s0: default_s0(),
            start_date: default_start_date(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.sigma >= 0.0) {
            return bad("sigma must be >= 0");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be > 0");
        }
        if self.steps < 1 {
            return bad("steps must be >= 1");
        }
        if !(self.s0 > 0.0 && self.s0.is_finite()) {
            return bad("s0 must be > 0");
        }
        if self.model == SyntheticModel::Heston {
            if !(self.kappa >= 0.0 && self.theta >= 0.0 && self.nu >= 0.0 && self.v0 >= 0.0) {
                return bad("heston kappa, theta, nu, v0 must be >= 0");
            }
            if !(-1.0..=1.0).contains(&self.rho) {
                return bad("heston rho must lie in [-1, 1]");
            }
        }
        Ok(())
    }

    fn dates(&self) -> Vec<NaiveDate> {
        (0..=self.steps as i64).map(|k| self.start_date + Duration::days(k)).collect()
    }
}

fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

/// One Heston path along with its (truncated, non-negative) variance.
pub fn simulate_heston_path(spec: &SyntheticSpec, path: usize) -> Result<(PriceSeries, Vec<f64>)> {
    spec.validate()?;
    let mut rng = path_rng(spec.seed, path);
    let dt = spec.dt;
    let sq_dt = dt.sqrt();
    let rho_perp = (1.0 - spec.rho * spec.rho).max(0.0).sqrt();

    let mut log_s = spec.s0.ln();
    let mut v = spec.v0;
    let mut closes = Vec::with_capacity(spec.steps + 1);
    let mut variance = Vec::with_capacity(spec.steps + 1);
    closes.push(spec.s0);
    variance.push(v.max(0.0));
    for _ in 0..spec.steps {
        let z1: f64 = StandardNormal.sample(&mut rng);
        let z3: f64 = StandardNormal.sample(&mut rng);
        let z2 = spec.rho * z1 + rho_perp * z3;
        let v_pos = v.max(0.0);
        log_s += (spec.mu - 0.5 * v_pos) * dt + (v_pos).sqrt() * sq_dt * z1;
        v += spec.kappa * (spec.theta - v_pos) * dt + spec.nu * v_pos.sqrt() * sq_dt * z2;
        closes.push(log_s.exp());
        variance.push(v.max(0.0));
    }
    let series = PriceSeries::new(format!("heston_{path}"), spec.dates(), closes)?;
    Ok((series, variance))
}

fn simulate_gbm_path(spec: &SyntheticSpec, path: usize) -> Result<PriceSeries> {
    let mut rng = path_rng(spec.seed, path);
    let drift = (spec.mu - 0.5 * spec.sigma * spec.sigma) * spec.dt;
    let diffusion = spec.sigma * spec.dt.sqrt();
    let mut log_s = 0.0;
    let mut closes = Vec::with_capacity(spec.steps + 1);
    closes.push(spec.s0);
    for _ in 0..spec.steps {
        let z: f64 = if diffusion > 0.0 { StandardNormal.sample(&mut rng) } else { 0.0 };
        log_s += drift + diffusion * z;
        closes.push(spec.s0 * log_s.exp());
    }
    PriceSeries::new(format!("gbm_{path}"), spec.dates(), closes)
}

/// `n_paths` independent paths; path `i` uses RNG stream `i` of `spec.seed`.
///
/// GBM steps the exact log-normal solution; Heston uses full-truncation
/// Euler on the variance with log-Euler prices.
pub fn simulate_paths(spec: &SyntheticSpec, n_paths: usize) -> Result<Vec<PriceSeries>> {
    spec.validate()?;
    if n_paths < 1 {
        return Err(Error::InvalidConfig("n_paths must be >= 1".into()));
    }
    (0..n_paths)
        .into_par_iter()
        .map(|i| match spec.model {
            SyntheticModel::Gbm => simulate_gbm_path(spec, i),
            SyntheticModel::Heston => simulate_heston_path(spec, i).map(|(s, _)| s),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    #[test]
    fn parses_two_rows() {
        let s = parse_csv("date,close\n2024-01-02,100.0\n2024-01-03,101.0\n", "x").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.closes(), &[100.0, 101.0]);
    }

    #[test]
    fn sorts_rows_by_date() {
        let s = parse_csv("date,close\n2024-01-03,101\n2024-01-02,100\n", "x").unwrap();
        assert_eq!(s.dates()[0], d("2024-01-02"));
        assert_eq!(s.closes(), &[100.0, 101.0]);
    }

    #[test]
    fn rejects_duplicate_date() {
        let err = parse_csv("date,close\n2024-01-02,100\n2024-01-02,101\n", "x").unwrap_err();
        assert!(matches!(err, Error::DuplicateDate(x) if x == d("2024-01-02")));
    }

    #[test]
    fn rejects_negative_close_with_line() {
        let err = parse_csv("date,close\n2024-01-02,100\n2024-01-03,-5\n", "x").unwrap_err();
        assert!(matches!(err, Error::NonPositivePrice { line: 3, .. }));
    }

    #[test]
    fn reports_malformed_line_number() {
        let err = parse_csv("date,close\n2024-01-02,100\nnot-a-date,3\n", "x").unwrap_err();
        assert!(matches!(err, Error::MalformedRow { line: 3, .. }));
        let err = parse_csv("date,close\n2024-01-02,abc\n", "x").unwrap_err();
        assert!(matches!(err, Error::MalformedRow { line: 2, .. }));
    }

    #[test]
    fn rejects_single_row_and_bad_header() {
        assert!(matches!(
            parse_csv("date,close\n2024-01-02,100\n", "x"),
            Err(Error::TooFewObservations { found: 1, .. })
        ));
        assert!(matches!(parse_csv("day,price\n", "x"), Err(Error::MalformedRow { line: 1, .. })));
    }

    fn series(closes: &[f64]) -> PriceSeries {
        let dates = (0..closes.len()).map(|k| d("2024-01-01") + Duration::days(k as i64)).collect();
        PriceSeries::new("t", dates, closes.to_vec()).unwrap()
    }

    #[test]
    fn returns_formula() {
        assert_eq!(to_returns(&series(&[100.0, 101.0])).values().len(), 1);
        assert!((to_returns(&series(&[100.0, 101.0])).values()[0] - 0.01).abs() < 1e-15);
        assert_eq!(to_returns(&series(&[100.0, 100.0, 100.0])).values(), &[0.0, 0.0]);
        assert_eq!(to_returns(&series(&[100.0, 50.0, 100.0])).values(), &[-0.5, 1.0]);
    }

    #[test]
    fn returns_are_dated_at_interval_end() {
        let s = series(&[1.0, 2.0, 3.0]);
        let r = to_returns(&s);
        assert_eq!(r.dates(), &s.dates()[1..]);
    }

    #[test]
    fn window_selection() {
        let r = to_returns(&series(&[1.0, 2.0, 3.0, 4.0, 5.0]));
        let all = window(&r, d("2023-01-01"), d("2025-01-01")).unwrap();
        assert_eq!(all, r);
        let half = window(&r, d("2024-01-01"), d("2024-01-03")).unwrap();
        assert_eq!(half.values(), &r.values()[..2]);
        assert!(matches!(window(&r, d("2030-01-01"), d("2030-02-01")), Err(Error::EmptySelection { .. })));
    }

    #[test]
    fn gbm_zero_vol_is_flat() {
        let spec = SyntheticSpec::gbm(0.0, 0.0, 10, 1.0 / 252.0, 1);
        let paths = simulate_paths(&spec, 2).unwrap();
        for p in paths {
            assert!(p.closes().iter().all(|&c| c == 100.0));
        }
    }

    #[test]
    fn gbm_zero_vol_grows_exponentially() {
        let spec = SyntheticSpec::gbm(0.01, 0.0, 10, 1.0, 1);
        let p = &simulate_paths(&spec, 1).unwrap()[0];
        for w in p.closes().windows(2) {
            assert!((w[1] / w[0] - 0.01f64.exp()).abs() < 1e-12);
        }
        let terminal = p.closes()[10];
        assert!((terminal / (100.0 * 0.1f64.exp()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn seeded_paths_repeat() {
        let spec = SyntheticSpec::gbm(0.05, 0.2, 50, 1.0 / 252.0, 9);
        assert_eq!(simulate_paths(&spec, 3).unwrap(), simulate_paths(&spec, 3).unwrap());
        let h = SyntheticSpec::heston(0.0, 2.0, 0.04, 0.5, -0.7, 0.04, 50, 1.0 / 252.0, 3);
        assert_eq!(simulate_paths(&h, 2).unwrap(), simulate_paths(&h, 2).unwrap());
    }

    #[test]
    fn heston_variance_is_truncated() {
        let spec = SyntheticSpec::heston(0.0, 0.5, 0.01, 2.0, -0.9, 0.01, 2000, 1.0 / 252.0, 11);
        let (_, var) = simulate_heston_path(&spec, 0).unwrap();
        assert!(var.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn spec_validation() {
        let mut s = SyntheticSpec::gbm(0.0, -1.0, 1, 1.0, 0);
        assert!(s.validate().is_err());
        s.sigma = 0.1;
        s.dt = 0.0;
        assert!(s.validate().is_err());
        let mut h = SyntheticSpec::heston(0.0, 1.0, 0.04, 0.3, 1.5, 0.04, 5, 0.1, 0);
        assert!(h.validate().is_err());
        h.rho = -1.0;
        assert!(h.validate().is_ok());
    }

    #[test]
    fn synthetic_spec_json_keys() {
        let json = r#"{"model":"heston","mu":0.0,"sigma":0.0,"kappa":2.0,"theta":0.04,
            "nu":0.5,"rho":-0.7,"v0":0.04,"steps":10,"dt":0.004,"seed":7}"#;
        let spec: SyntheticSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.model, SyntheticModel::Heston);
        assert_eq!(spec.s0, 100.0);
    }
}
