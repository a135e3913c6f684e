//! Out-of-sample backtest of a hedge policy: primal vs hedged net value,
//! hedge ratios, P&L histograms, tail metrics, CSV/JSON output and SVG
//! charts.

use std::fmt::Write as _;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::marketdata::{to_returns, PriceSeries};
use crate::neuralopt::{features_at, HedgePolicy};
use crate::portfolio::{CostModel, CostSpec};
use crate::riskmeasures::empirical_var_cvar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestConfig {
    pub test_start: NaiveDate,
    pub test_end: NaiveDate,
    #[serde(default = "default_rebalance")]
    pub rebalance_every: usize,
    #[serde(default = "default_units")]
    pub initial_units: f64,
    #[serde(default)]
    pub cost: CostSpec,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_rebalance() -> usize {
    1
}

fn default_units() -> f64 {
    1.0
}

fn default_alpha() -> f64 {
    0.99
}

impl BacktestConfig {
    pub fn new(test_start: NaiveDate, test_end: NaiveDate) -> Self {
        Self {
            test_start,
            test_end,
            rebalance_every: default_rebalance(),
            initial_units: default_units(),
            cost: CostSpec::default(),
            alpha: default_alpha(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.test_start >= self.test_end {
            return Err(Error::InvalidConfig(format!(
                "test start {} is not before test end {}",
                self.test_start, self.test_end
            )));
        }
        if self.rebalance_every < 1 {
            return Err(Error::InvalidConfig("rebalance_every must be >= 1".into()));
        }
        if !self.initial_units.is_finite() {
            return Err(Error::NonFinite("initial units"));
        }
        crate::riskmeasures::check_alpha(self.alpha)?;
        self.cost.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailPair {
    pub var99: f64,
    pub cvar99: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub alpha: f64,
    pub primal: TailPair,
    pub hedged: TailPair,
}

/// `dates`, both net values and `hedge_ratio` have one entry per test date;
/// the P&L series have one entry per step between consecutive dates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub dates: Vec<NaiveDate>,
    pub primal_net_value: Vec<f64>,
    pub hedged_net_value: Vec<f64>,
    /// Signed hedge units per primary unit decided at each date.
    pub hedge_ratio: Vec<f64>,
    pub primal_pnl: Vec<f64>,
    pub hedged_pnl: Vec<f64>,
    /// Explicit costs paid at each step, normalized like the P&L.
    pub costs: Vec<f64>,
    pub metrics: Metrics,
}

/// Runs `policy` over the test window. Hedge units decided at date `t` use
/// returns up to `t` and are held until the next rebalance; costs are
/// charged on the change in units at the hedge instrument's price at `t`.
pub fn run_backtest(
    policy: &HedgePolicy,
    primary: &PriceSeries,
    hedges: &[PriceSeries],
    cfg: &BacktestConfig,
) -> Result<BacktestReport> {
    cfg.validate()?;
    policy.validate()?;
    if policy.n_feature_assets() != 1 {
        return Err(Error::InvalidConfig("policies read the primary asset's returns only".into()));
    }
    if hedges.len() != policy.n_instruments {
        return Err(Error::DimensionMismatch(format!(
            "{} hedge series for a policy with {} outputs",
            hedges.len(),
            policy.n_instruments
        )));
    }
    for h in hedges {
        if h.dates() != primary.dates() {
            return Err(Error::DateMisalignment(format!(
                "{} and {} have different dates",
                primary.asset_id(),
                h.asset_id()
            )));
        }
    }

    let dates = primary.dates();
    let lo = dates.partition_point(|d| *d < cfg.test_start);
    let hi = dates.partition_point(|d| *d <= cfg.test_end);
    if hi < lo + 2 {
        return Err(Error::EmptySelection { start: cfg.test_start, end: cfg.test_end });
    }
    let w = policy.feature_window;
    if lo < w {
        return Err(Error::InsufficientHistory { date: dates[lo], required: w, available: lo });
    }

    let returns = to_returns(primary);
    let feature_src = [returns.values()];
    let s = primary.closes();
    let units = cfg.initial_units;
    let d = policy.n_instruments;

    let mut value_c = units * s[lo];
    let mut value_h = value_c;
    let base = value_c;
    if base == 0.0 {
        return Err(Error::ZeroValue);
    }
    let mut primal_nv = vec![1.0];
    let mut hedged_nv = vec![1.0];
    let mut ratio = Vec::with_capacity(hi - lo);
    let mut primal_pnl = Vec::with_capacity(hi - lo - 1);
    let mut hedged_pnl = Vec::with_capacity(hi - lo - 1);
    let mut costs = Vec::with_capacity(hi - lo - 1);

    let mut held = vec![0.0; d];
    for p in lo..hi {
        let mut step_cost = 0.0;
        if (p - lo) % cfg.rebalance_every == 0 {
            let next = policy.act(&features_at(&feature_src, p, w)?)?;
            if next.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("hedge units"));
            }
            if p + 1 < hi {
                let dh: Vec<f64> = next.iter().zip(&held).map(|(a, b)| a - b).collect();
                let hp: Vec<f64> = hedges.iter().map(|x| x.closes()[p]).collect();
                step_cost = cfg.cost.cost(&dh, &hp)?;
            }
            held = next;
        }
        ratio.push(if units != 0.0 { held[0] / units } else { held[0] });
        if p + 1 == hi {
            break;
        }

        let dc = units * (s[p + 1] - s[p]);
        let dh: f64 = held.iter().zip(hedges).map(|(u, x)| u * (x.closes()[p + 1] - x.closes()[p])).sum();
        let pnl_h = dc + dh - step_cost;
        value_c += dc;
        value_h += pnl_h;
        primal_nv.push(value_c / base);
        hedged_nv.push(value_h / base);
        primal_pnl.push(dc / base);
        hedged_pnl.push(pnl_h / base);
        costs.push(step_cost / base);
    }

    let mut report = BacktestReport {
        dates: dates[lo..hi].to_vec(),
        primal_net_value: primal_nv,
        hedged_net_value: hedged_nv,
        hedge_ratio: ratio,
        primal_pnl,
        hedged_pnl,
        costs,
        metrics: Metrics {
            alpha: cfg.alpha,
            primal: TailPair { var99: 0.0, cvar99: 0.0 },
            hedged: TailPair { var99: 0.0, cvar99: 0.0 },
        },
    };
    report.metrics = report_metrics(&report, cfg.alpha)?;
    Ok(report)
}

/// Empirical VaR/CVaR of the negated per-step net-value changes.
pub fn report_metrics(report: &BacktestReport, alpha: f64) -> Result<Metrics> {
    let tail = |pnl: &[f64]| -> Result<TailPair> {
        let losses: Vec<f64> = pnl.iter().map(|x| -x).collect();
        let e = empirical_var_cvar(&losses, alpha)?;
        Ok(TailPair { var99: e.var, cvar99: e.cvar })
    };
    Ok(Metrics { alpha, primal: tail(&report.primal_pnl)?, hedged: tail(&report.hedged_pnl)? })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `counts.len() + 1` edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// `n_bins + 1` equal-width edges over `[lo, hi]`.
pub fn equal_width_edges(lo: f64, hi: f64, n_bins: usize) -> Vec<f64> {
    let width = (hi - lo) / n_bins as f64;
    (0..=n_bins).map(|i| if i == n_bins { hi } else { lo + i as f64 * width }).collect()
}

/// Bins are `[e_i, e_{i+1})` except the last, which includes `hi`. Values
/// outside the edges go to the nearest end bin.
pub fn histogram_with_edges(series: &[f64], edges: &[f64]) -> Result<Histogram> {
    if edges.len() < 2 {
        return Err(Error::InvalidConfig("a histogram needs at least one bin".into()));
    }
    let n_bins = edges.len() - 1;
    let mut counts = vec![0; n_bins];
    for x in series {
        if !x.is_finite() {
            return Err(Error::NonFinite("histogram input"));
        }
        let b = edges[1..n_bins].partition_point(|e| e <= x);
        counts[b] += 1;
    }
    Ok(Histogram { edges: edges.to_vec(), counts })
}

pub fn pnl_histogram(series: &[f64], n_bins: usize) -> Result<Histogram> {
    if series.is_empty() {
        return Err(Error::EmptyInput("pnl series"));
    }
    if n_bins < 1 {
        return Err(Error::InvalidConfig("n_bins must be >= 1".into()));
    }
    let lo = series.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    histogram_with_edges(series, &equal_width_edges(lo, hi, n_bins))
}

/// Pointwise mean hedge ratio over reports that share dates.
pub fn expected_hedge_ratio(reports: &[BacktestReport]) -> Result<Vec<f64>> {
    let Some(first) = reports.first() else {
        return Err(Error::EmptyInput("reports"));
    };
    if reports.iter().any(|r| r.dates != first.dates || r.hedge_ratio.len() != first.hedge_ratio.len()) {
        return Err(Error::DateMisalignment("reports cover different dates".into()));
    }
    let n = reports.len() as f64;
    Ok((0..first.hedge_ratio.len())
        .map(|i| {
            let mut sum = 0.0;
            for r in reports {
                sum += r.hedge_ratio[i];
            }
            sum / n
        })
        .collect())
}

fn fmt_date(d: &NaiveDate) -> String {
    d.format("%Y-%m-%d").to_string()
}

pub fn networth_csv(report: &BacktestReport) -> String {
    let mut out = String::from("date,primal,hedged\n");
    for ((d, p), h) in report.dates.iter().zip(&report.primal_net_value).zip(&report.hedged_net_value) {
        let _ = writeln!(out, "{},{p},{h}", fmt_date(d));
    }
    out
}

/// Hedge-ratio magnitudes, one row per date.
pub fn hedge_ratio_csv(report: &BacktestReport) -> String {
    let mut out = String::from("date,ratio\n");
    for (d, r) in report.dates.iter().zip(&report.hedge_ratio) {
        let _ = writeln!(out, "{},{}", fmt_date(d), r.abs());
    }
    out
}

/// Primal and hedged P&L counts over shared equal-width bins.
pub fn pnl_hist_csv(report: &BacktestReport, n_bins: usize) -> Result<String> {
    let all: Vec<f64> = report.primal_pnl.iter().chain(&report.hedged_pnl).copied().collect();
    let shared = pnl_histogram(&all, n_bins)?;
    let primal = histogram_with_edges(&report.primal_pnl, &shared.edges)?;
    let hedged = histogram_with_edges(&report.hedged_pnl, &shared.edges)?;
    let mut out = String::from("bin_lo,bin_hi,primal_count,hedged_count\n");
    for i in 0..n_bins {
        let _ = writeln!(out, "{},{},{},{}", shared.edges[i], shared.edges[i + 1], primal.counts[i], hedged.counts[i]);
    }
    Ok(out)
}

pub fn metrics_json(metrics: &Metrics) -> Result<String> {
    Ok(serde_json::to_string_pretty(&serde_json::json!({
        "alpha": metrics.alpha,
        "primal": {"var99": metrics.primal.var99, "cvar99": metrics.primal.cvar99},
        "hedged": {"var99": metrics.hedged.var99, "cvar99": metrics.hedged.cvar99},
    }))?)
}

/// Writes `networth.csv`, `hedge_ratio.csv`, `pnl_hist.csv` and
/// `metrics.json` into `dir`.
pub fn write_outputs(report: &BacktestReport, dir: &Path, n_bins: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("networth.csv"), networth_csv(report))?;
    std::fs::write(dir.join("hedge_ratio.csv"), hedge_ratio_csv(report))?;
    std::fs::write(dir.join("pnl_hist.csv"), pnl_hist_csv(report, n_bins)?)?;
    std::fs::write(dir.join("metrics.json"), metrics_json(&report.metrics)? + "\n")?;
    Ok(())
}

const SVG_W: f64 = 720.0;
const SVG_H: f64 = 360.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e"];

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        SVG_W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r##"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="#888"/>"##,
        SVG_W - 2.0 * PAD,
        SVG_H - 2.0 * PAD
    );
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn y_labels(s: &mut String, lo: f64, hi: f64) {
    for (v, y) in [(hi, PAD), (lo, SVG_H - PAD)] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end">{:.4}</text>"#,
            PAD - 4.0,
            y + 3.0,
            v
        );
    }
}

fn legend(s: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = PAD + 14.0 + 14.0 * i as f64;
        let x = SVG_W - PAD - 110.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}" font-family="sans-serif" font-size="11">{}</text>"#,
            y - 9.0,
            COLORS[i % COLORS.len()],
            x + 14.0,
            y,
            escape(name)
        );
    }
}

/// Line chart of one or more equally long series.
pub fn svg_lines(title: &str, names: &[&str], series: &[Vec<f64>], x_labels: (&str, &str)) -> String {
    let (lo, hi) = span(series.iter().flatten().copied());
    let mut s = svg_open(title);
    y_labels(&mut s, lo, hi);
    let inner_w = SVG_W - 2.0 * PAD;
    let inner_h = SVG_H - 2.0 * PAD;
    for (i, ys) in series.iter().enumerate() {
        let n = ys.len().max(2) - 1;
        let mut pts = String::new();
        for (k, y) in ys.iter().enumerate() {
            let px = PAD + inner_w * k as f64 / n as f64;
            let py = PAD + inner_h * (1.0 - (y - lo) / (hi - lo));
            let _ = write!(pts, "{px:.2},{py:.2} ");
        }
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.2" points="{}"/>"#,
            COLORS[i % COLORS.len()],
            pts.trim_end()
        );
    }
    for (label, x, anchor) in [(x_labels.0, PAD, "start"), (x_labels.1, SVG_W - PAD, "end")] {
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" font-family="sans-serif" font-size="10" text-anchor="{anchor}">{}</text>"#,
            SVG_H - PAD + 14.0,
            escape(label)
        );
    }
    legend(&mut s, names);
    s.push_str("</svg>\n");
    s
}

/// Grouped bar chart: one group per label, one bar per series.
pub fn svg_bars(title: &str, labels: &[String], names: &[&str], values: &[Vec<f64>]) -> String {
    let (lo, hi) = span(values.iter().flatten().copied().chain(std::iter::once(0.0)));
    let mut s = svg_open(title);
    y_labels(&mut s, lo, hi);
    let inner_w = SVG_W - 2.0 * PAD;
    let inner_h = SVG_H - 2.0 * PAD;
    let to_y = |v: f64| PAD + inner_h * (1.0 - (v - lo) / (hi - lo));
    let groups = labels.len().max(1);
    let group_w = inner_w / groups as f64;
    let bar_w = group_w * 0.8 / values.len().max(1) as f64;
    for (g, label) in labels.iter().enumerate() {
        for (i, vals) in values.iter().enumerate() {
            let v = vals.get(g).copied().unwrap_or(0.0);
            let x = PAD + g as f64 * group_w + group_w * 0.1 + i as f64 * bar_w;
            let (top, bottom) = (to_y(v.max(0.0)), to_y(v.min(0.0)));
            let _ = writeln!(
                s,
                r#"<rect x="{x:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{}" fill-opacity="0.8"/>"#,
                bar_w,
                (bottom - top).max(0.0),
                COLORS[i % COLORS.len()]
            );
        }
        if labels.len() <= 12 {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{}</text>"#,
                PAD + (g as f64 + 0.5) * group_w,
                SVG_H - PAD + 14.0,
                escape(label)
            );
        }
    }
    legend(&mut s, names);
    s.push_str("</svg>\n");
    s
}
