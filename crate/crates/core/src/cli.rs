//! Command-line front end: `simulate`, `risk`, `train`, `backtest`,
//! `report` and `replay`. Settings resolve as flags over `--config` over
//! built-in defaults, and every run writes the resolved settings to
//! `manifest.json` in its output directory.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::backtest::{self, BacktestConfig};
use crate::bootstrap::{build_scenarios, heuristic_block_length, BootstrapConfig, BootstrapMethod, ScenarioSet};
use crate::error::{Error, Result};
use crate::marketdata::{self, load_csv, simulate_paths, to_returns, PriceSeries, SyntheticModel, SyntheticSpec};
use crate::neuralopt::{self, HedgePolicy, TrainConfig, TrainingData};
use crate::portfolio::CostSpec;
use crate::riskmeasures::{self, RiskEstimate, RiskMethod};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub primary: Option<PathBuf>,
    /// Hedge instrument closes; the primary itself when absent.
    pub hedge: Option<PathBuf>,
    /// One loss per line, for `risk`.
    pub losses: Option<PathBuf>,
    pub policy: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub model: SyntheticModel,
    pub mu: f64,
    pub sigma: f64,
    pub kappa: f64,
    pub theta: f64,
    pub nu: f64,
    pub rho: f64,
    pub v0: f64,
    pub steps: usize,
    pub dt: f64,
    pub s0: f64,
    pub start_date: NaiveDate,
    pub paths: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            model: SyntheticModel::Gbm,
            mu: 0.05,
            sigma: 0.2,
            kappa: 2.0,
            theta: 0.04,
            nu: 0.5,
            rho: -0.7,
            v0: 0.04,
            steps: 2520,
            dt: 1.0 / 252.0,
            s0: 100.0,
            start_date: NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid date"),
            paths: 1,
        }
    }
}

impl SimulateSection {
    fn to_spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            model: self.model,
            mu: self.mu,
            sigma: self.sigma,
            kappa: self.kappa,
            theta: self.theta,
            nu: self.nu,
            rho: self.rho,
            v0: self.v0,
            steps: self.steps,
            dt: self.dt,
            seed,
            s0: self.s0,
            start_date: self.start_date,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiskSection {
    pub method: RiskMethod,
    pub alpha: f64,
    /// Target horizon in steps of the input series.
    pub horizon: usize,
    pub threshold_quantile: f64,
    /// GEV block size; `sqrt(n)` when absent.
    pub block_size: Option<usize>,
    pub scenarios: usize,
}

impl Default for RiskSection {
    fn default() -> Self {
        Self {
            method: RiskMethod::Empirical,
            alpha: 0.99,
            horizon: 1,
            threshold_quantile: riskmeasures::DEFAULT_GPD_THRESHOLD_QUANTILE,
            block_size: None,
            scenarios: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapSection {
    pub method: BootstrapMethod,
    /// Cube-root heuristic when absent.
    pub block_len: Option<usize>,
}

impl Default for BootstrapSection {
    fn default() -> Self {
        Self { method: BootstrapMethod::MovingBlock, block_len: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub train_start: Option<NaiveDate>,
    pub train_end: Option<NaiveDate>,
    pub hidden: String,
    pub iterations: usize,
    pub learning_rate: f64,
    pub lr_backoff: f64,
    pub alpha: f64,
    pub scenarios: usize,
    pub feature_window: usize,
    /// Where to write the policy; `<out_dir>/policy.json` when absent.
    pub policy_out: Option<PathBuf>,
    pub dump_scenarios: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            train_start: None,
            train_end: None,
            hidden: "none".into(),
            iterations: t.iterations,
            learning_rate: t.learning_rate,
            lr_backoff: t.backoff,
            alpha: t.alpha,
            scenarios: t.scenarios,
            feature_window: neuralopt::DEFAULT_FEATURE_WINDOW,
            policy_out: None,
            dump_scenarios: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestSection {
    pub test_start: Option<NaiveDate>,
    pub test_end: Option<NaiveDate>,
    pub rebalance_every: usize,
    pub initial_units: f64,
    pub alpha: f64,
    pub bins: usize,
}

impl Default for BacktestSection {
    fn default() -> Self {
        Self { test_start: None, test_end: None, rebalance_every: 1, initial_units: 1.0, alpha: 0.99, bins: 50 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// Directory holding backtest outputs; `out_dir` when absent.
    pub in_dir: Option<PathBuf>,
}

/// Everything a run needs. This is also the `config` block of a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataPaths,
    pub simulate: SimulateSection,
    pub risk: RiskSection,
    pub bootstrap: BootstrapSection,
    pub train: TrainSection,
    pub backtest: BacktestSection,
    pub report: ReportSection,
    pub cost: CostSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            data: DataPaths::default(),
            simulate: SimulateSection::default(),
            risk: RiskSection::default(),
            bootstrap: BootstrapSection::default(),
            train: TrainSection::default(),
            backtest: BacktestSection::default(),
            report: ReportSection::default(),
            cost: CostSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read config {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: RunConfig,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read manifest {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Parser)]
#[command(name = "tailhedge", version, about = "CVaR tail-risk hedging with MLP policies")]
pub struct Cli {
    /// JSON run configuration; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic GBM or Heston closes as CSV.
    Simulate(SimulateArgs),
    /// VaR and CVaR of a loss or price series.
    Risk(RiskArgs),
    /// Train a hedge policy on bootstrapped scenarios.
    Train(TrainArgs),
    /// Backtest a trained policy.
    Backtest(BacktestArgs),
    /// Render backtest outputs as SVG charts.
    Report(ReportArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_parser = parse_model)]
    pub model: Option<SyntheticModel>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub v0: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub s0: Option<f64>,
    #[arg(long)]
    pub start_date: Option<NaiveDate>,
    #[arg(long)]
    pub paths: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RiskArgs {
    /// `date,close` prices; losses are negated returns.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// One loss per line.
    #[arg(long)]
    pub losses: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub method: Option<RiskMethod>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub threshold_quantile: Option<f64>,
    #[arg(long)]
    pub block_size: Option<usize>,
    #[arg(long)]
    pub scenarios: Option<usize>,
    #[arg(long = "bootstrap")]
    pub bootstrap_method: Option<BootstrapMethod>,
    #[arg(long)]
    pub block_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub hedge_data: Option<PathBuf>,
    #[arg(long)]
    pub train_start: Option<NaiveDate>,
    #[arg(long)]
    pub train_end: Option<NaiveDate>,
    /// Hidden widths such as `32x32`, or `none`.
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Step size multiplier on a loss increase; 1 keeps the step fixed.
    #[arg(long)]
    pub lr_backoff: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub scenarios: Option<usize>,
    #[arg(long)]
    pub method: Option<BootstrapMethod>,
    #[arg(long)]
    pub block_len: Option<usize>,
    #[arg(long)]
    pub feature_window: Option<usize>,
    #[arg(long)]
    pub cost_rate: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write every scenario path to `scenarios.csv`.
    #[arg(long)]
    pub dump_scenarios: bool,
}

#[derive(Debug, Args)]
pub struct BacktestArgs {
    #[arg(long)]
    pub policy: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub hedge_data: Option<PathBuf>,
    #[arg(long)]
    pub test_start: Option<NaiveDate>,
    #[arg(long)]
    pub test_end: Option<NaiveDate>,
    #[arg(long)]
    pub cost_rate: Option<f64>,
    #[arg(long)]
    pub rebalance_every: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub in_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

fn parse_model(s: &str) -> std::result::Result<SyntheticModel, String> {
    match s {
        "gbm" => Ok(SyntheticModel::Gbm),
        "heston" => Ok(SyntheticModel::Heston),
        other => Err(format!("unknown model `{other}`")),
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn set_some<T>(slot: &mut Option<T>, flag: Option<T>) {
    if flag.is_some() {
        *slot = flag;
    }
}

/// Applies the subcommand's flags on top of `cfg` and names the command.
fn apply_flags(cfg: &mut RunConfig, cmd: Command) -> Result<(&'static str, Option<PathBuf>)> {
    match cmd {
        Command::Simulate(a) => {
            let s = &mut cfg.simulate;
            set(&mut s.model, a.model);
            set(&mut s.mu, a.mu);
            set(&mut s.sigma, a.sigma);
            set(&mut s.kappa, a.kappa);
            set(&mut s.theta, a.theta);
            set(&mut s.nu, a.nu);
            set(&mut s.rho, a.rho);
            set(&mut s.v0, a.v0);
            set(&mut s.steps, a.steps);
            set(&mut s.dt, a.dt);
            set(&mut s.s0, a.s0);
            set(&mut s.start_date, a.start_date);
            set(&mut s.paths, a.paths);
            Ok(("simulate", None))
        }
        Command::Risk(a) => {
            set_some(&mut cfg.data.primary, a.data);
            set_some(&mut cfg.data.losses, a.losses);
            let r = &mut cfg.risk;
            set(&mut r.alpha, a.alpha);
            set(&mut r.method, a.method);
            set(&mut r.horizon, a.horizon);
            set(&mut r.threshold_quantile, a.threshold_quantile);
            set_some(&mut r.block_size, a.block_size);
            set(&mut r.scenarios, a.scenarios);
            set(&mut cfg.bootstrap.method, a.bootstrap_method);
            set_some(&mut cfg.bootstrap.block_len, a.block_len);
            Ok(("risk", None))
        }
        Command::Train(a) => {
            set_some(&mut cfg.data.primary, a.data);
            set_some(&mut cfg.data.hedge, a.hedge_data);
            let t = &mut cfg.train;
            set_some(&mut t.train_start, a.train_start);
            set_some(&mut t.train_end, a.train_end);
            set(&mut t.hidden, a.hidden);
            set(&mut t.iterations, a.iters);
            set(&mut t.learning_rate, a.lr);
            set(&mut t.lr_backoff, a.lr_backoff);
            set(&mut t.alpha, a.alpha);
            set(&mut t.scenarios, a.scenarios);
            set(&mut t.feature_window, a.feature_window);
            set_some(&mut t.policy_out, a.out);
            if a.dump_scenarios {
                t.dump_scenarios = true;
            }
            set(&mut cfg.bootstrap.method, a.method);
            set_some(&mut cfg.bootstrap.block_len, a.block_len);
            set(&mut cfg.cost.proportional_rate, a.cost_rate);
            Ok(("train", None))
        }
        Command::Backtest(a) => {
            set_some(&mut cfg.data.policy, a.policy);
            set_some(&mut cfg.data.primary, a.data);
            set_some(&mut cfg.data.hedge, a.hedge_data);
            let b = &mut cfg.backtest;
            set_some(&mut b.test_start, a.test_start);
            set_some(&mut b.test_end, a.test_end);
            set(&mut b.rebalance_every, a.rebalance_every);
            set(&mut b.alpha, a.alpha);
            set(&mut b.bins, a.bins);
            set(&mut cfg.cost.proportional_rate, a.cost_rate);
            Ok(("backtest", None))
        }
        Command::Report(a) => {
            set_some(&mut cfg.report.in_dir, a.in_dir);
            Ok(("report", None))
        }
        Command::Replay(a) => Ok(("replay", Some(a.manifest))),
    }
}

fn require_file<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    let p = path.as_deref().ok_or_else(|| Error::InvalidConfig(format!("{what} path is required")))?;
    if !p.is_file() {
        return Err(Error::InvalidConfig(format!("{what} file {} does not exist", p.display())));
    }
    Ok(p)
}

fn write_manifest(cfg: &RunConfig, command: &str) -> Result<()> {
    let manifest = Manifest {
        tool: "tailhedge".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        config: cfg.clone(),
    };
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

/// Runs a fully resolved command and returns what it prints.
pub fn execute(command: &str, cfg: &RunConfig) -> Result<String> {
    cfg.cost.validate()?;
    let out = match command {
        "simulate" => cmd_simulate(cfg)?,
        "risk" => cmd_risk(cfg)?,
        "train" => cmd_train(cfg)?,
        "backtest" => cmd_backtest(cfg)?,
        "report" => cmd_report(cfg)?,
        other => return Err(Error::InvalidConfig(format!("unknown command `{other}`"))),
    };
    write_manifest(cfg, command)?;
    Ok(out)
}

fn cmd_simulate(cfg: &RunConfig) -> Result<String> {
    let spec = cfg.simulate.to_spec(cfg.seed);
    let paths = simulate_paths(&spec, cfg.simulate.paths)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut written = Vec::new();
    for (i, p) in paths.iter().enumerate() {
        let name = if paths.len() == 1 { "prices.csv".to_string() } else { format!("prices_{i:03}.csv") };
        let path = cfg.out_dir.join(&name);
        std::fs::write(&path, p.to_csv())?;
        written.push(path.display().to_string());
    }
    Ok(format!("wrote {}\n", written.join(", ")))
}

/// Reads one loss per line; a non-numeric first line is a header. A file
/// starting with `date,close` is read as prices and turned into negated
/// simple returns.
pub fn read_losses(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    if first.trim().trim_start_matches('\u{feff}') == "date,close" {
        let prices = marketdata::parse_csv(&text, "losses")?;
        return Ok(to_returns(&prices).values().iter().map(|r| -r).collect());
    }
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        match t.parse::<f64>() {
            Ok(v) => out.push(v),
            Err(_) if out.is_empty() && i == text.lines().position(|l| !l.trim().is_empty()).unwrap_or(0) => {}
            Err(_) => {
                return Err(Error::MalformedRow { line: i + 1, reason: format!("bad loss `{t}`") });
            }
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("losses"));
    }
    Ok(out)
}

fn estimate_json(e: &RiskEstimate, extra: Option<(f64, bool)>) -> serde_json::Value {
    let mut v = serde_json::json!({
        "method": e.method.as_str(),
        "alpha": e.alpha,
        "horizon": e.tau_steps,
        "n_obs": e.n_obs,
        "var": e.var,
        "cvar": e.cvar,
    });
    if let Some((variant, disagrees)) = extra {
        v["variant_check"] = serde_json::json!({"variant_value": variant, "disagrees": disagrees});
    }
    v
}

fn cmd_risk(cfg: &RunConfig) -> Result<String> {
    let losses = match (&cfg.data.losses, &cfg.data.primary) {
        (Some(_), _) => read_losses(require_file(&cfg.data.losses, "losses")?)?,
        (None, Some(_)) => read_losses(require_file(&cfg.data.primary, "price")?)?,
        (None, None) => return Err(Error::InvalidConfig("risk needs --losses or --data".into())),
    };
    let r = &cfg.risk;
    if r.horizon < 1 {
        return Err(Error::InvalidConfig("horizon must be >= 1".into()));
    }
    let (est, check) = match r.method {
        RiskMethod::Empirical => (riskmeasures::empirical_var_cvar(&losses, r.alpha)?, None),
        RiskMethod::Normal => {
            let (mu, sd) = riskmeasures::mean_std(&losses);
            let mut e = riskmeasures::normal_var_cvar(mu, sd, r.alpha)?;
            e.n_obs = losses.len();
            (e, None)
        }
        RiskMethod::Gpd => {
            let fit = riskmeasures::fit_gpd(&losses, r.threshold_quantile)?;
            let t = riskmeasures::gpd_var_cvar(&fit, r.alpha)?;
            (t.estimate, Some(t.check))
        }
        RiskMethod::Gev => {
            let bs = r.block_size.unwrap_or_else(|| ((losses.len() as f64).sqrt() as usize).max(1));
            let fit = riskmeasures::fit_gev(&losses, bs)?;
            let t = riskmeasures::gev_var_cvar(&fit, r.alpha)?;
            (t.estimate, Some(t.check))
        }
        RiskMethod::MonteCarlo => {
            let returns: Vec<f64> = losses.iter().map(|l| -l).collect();
            let block = cfg.bootstrap.block_len.unwrap_or_else(|| heuristic_block_length(returns.len()));
            let boot = BootstrapConfig::new(cfg.bootstrap.method, block, r.horizon, cfg.seed);
            let sets = build_scenarios(&[&returns], &[0], r.scenarios, r.horizon, &boot)?;
            (riskmeasures::monte_carlo_var_cvar(&sets[0], &[1.0], r.alpha)?, None)
        }
    };
    let est = if r.method != RiskMethod::MonteCarlo && r.horizon != est.tau_steps {
        riskmeasures::scale_horizon(&est, r.horizon)?
    } else {
        est
    };
    let json = estimate_json(&est, check.map(|c| (c.variant, c.disagrees)));
    std::fs::create_dir_all(&cfg.out_dir)?;
    let text = serde_json::to_string_pretty(&json)? + "\n";
    std::fs::write(cfg.out_dir.join("risk.json"), &text)?;
    Ok(format!("var {} cvar {}\n", est.var, est.cvar))
}

fn load_prices(cfg: &RunConfig) -> Result<(PriceSeries, Vec<PriceSeries>)> {
    let primary = load_csv(require_file(&cfg.data.primary, "price data")?)?;
    let hedge = match &cfg.data.hedge {
        Some(_) => load_csv(require_file(&cfg.data.hedge, "hedge data")?)?,
        None => primary.clone(),
    };
    Ok((primary, vec![hedge]))
}

fn scenarios_csv(sets: &[ScenarioSet]) -> String {
    let mut out = String::from("anchor,scenario,step,asset,return\n");
    for set in sets {
        for a in 0..set.n_assets() {
            for j in 0..set.m {
                for (s, r) in set.path(a, j).iter().enumerate() {
                    let _ = writeln!(out, "{},{j},{s},{a},{r}", set.origin_index);
                }
            }
        }
    }
    out
}

fn cmd_train(cfg: &RunConfig) -> Result<String> {
    let (primary, hedges) = load_prices(cfg)?;
    let t = &cfg.train;
    let start = t.train_start.unwrap_or(primary.dates()[0]);
    let end = t.train_end.unwrap_or(*primary.dates().last().expect("non-empty series"));
    let primary = primary.window(start, end)?;
    let hedges = hedges.iter().map(|h| h.window(start, end)).collect::<Result<Vec<_>>>()?;
    let data = TrainingData::new(primary, hedges)?;

    let hidden = neuralopt::parse_hidden(&t.hidden)?;
    let policy = HedgePolicy::new(&hidden, t.feature_window, data.hedges.len(), cfg.seed)?;
    let anchors = data.default_anchors(t.feature_window);
    if anchors.is_empty() {
        return Err(Error::TooFewObservations { found: data.n_prices(), required: t.feature_window + 1 });
    }
    let train_cfg = TrainConfig {
        iterations: t.iterations,
        learning_rate: t.learning_rate,
        alpha: t.alpha,
        scenarios: t.scenarios,
        tau_steps: 1,
        primary_units: 1.0,
        seed: cfg.seed,
        cost: cfg.cost,
        backoff: t.lr_backoff,
    };
    let n_returns = data.n_prices() - 1;
    let block = cfg.bootstrap.block_len.unwrap_or_else(|| heuristic_block_length(n_returns));
    let boot = BootstrapConfig::new(cfg.bootstrap.method, block, 1, cfg.seed);
    let (batch, sets) = neuralopt::build_batch(&policy, &data, &anchors, &train_cfg, &boot)?;
    log::info!("training {policy} on {} anchors x {} scenarios", anchors.len(), train_cfg.scenarios);
    let outcome = neuralopt::train_on_batch(&policy, &batch, &train_cfg)?;

    std::fs::create_dir_all(&cfg.out_dir)?;
    let policy_path = t.policy_out.clone().unwrap_or_else(|| cfg.out_dir.join("policy.json"));
    if let Some(parent) = policy_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&policy_path, outcome.policy.to_json()? + "\n")?;
    let mut hist = String::from("iteration,loss\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        let _ = writeln!(hist, "{i},{l}");
    }
    std::fs::write(cfg.out_dir.join("loss_history.csv"), hist)?;
    if t.dump_scenarios {
        std::fs::write(cfg.out_dir.join("scenarios.csv"), scenarios_csv(&sets))?;
    }
    Ok(format!(
        "initial loss {} final loss {} policy {}\n",
        outcome.losses[0],
        outcome.final_loss,
        policy_path.display()
    ))
}

fn cmd_backtest(cfg: &RunConfig) -> Result<String> {
    let policy = HedgePolicy::from_json(&std::fs::read_to_string(require_file(&cfg.data.policy, "policy")?)?)?;
    let (primary, hedges) = load_prices(cfg)?;
    let b = &cfg.backtest;
    let bt = BacktestConfig {
        test_start: b.test_start.ok_or_else(|| Error::InvalidConfig("test start is required".into()))?,
        test_end: b.test_end.ok_or_else(|| Error::InvalidConfig("test end is required".into()))?,
        rebalance_every: b.rebalance_every,
        initial_units: b.initial_units,
        cost: cfg.cost,
        alpha: b.alpha,
    };
    let report = backtest::run_backtest(&policy, &primary, &hedges, &bt)?;
    backtest::write_outputs(&report, &cfg.out_dir, b.bins)?;
    let m = report.metrics;
    Ok(format!(
        "primal var {} cvar {} hedged var {} cvar {}\n",
        m.primal.var99, m.primal.cvar99, m.hedged.var99, m.hedged.cvar99
    ))
}

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or(Error::EmptyInput("report table"))?.split(',').map(str::to_string).collect();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    Ok((header, rows))
}

fn column(rows: &[Vec<String>], i: usize, path: &Path) -> Result<Vec<f64>> {
    rows.iter()
        .enumerate()
        .map(|(k, r)| {
            r.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::MalformedRow { line: k + 2, reason: format!("bad value in {}", path.display()) })
        })
        .collect()
}

fn cmd_report(cfg: &RunConfig) -> Result<String> {
    let dir = cfg.report.in_dir.clone().unwrap_or_else(|| cfg.out_dir.clone());
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut written = Vec::new();
    let mut emit = |name: &str, svg: String| -> Result<()> {
        std::fs::write(cfg.out_dir.join(name), svg)?;
        written.push(name.to_string());
        Ok(())
    };

    let nw = dir.join("networth.csv");
    let (_, rows) = read_table(&nw)?;
    let first = rows.first().and_then(|r| r.first()).cloned().unwrap_or_default();
    let last = rows.last().and_then(|r| r.first()).cloned().unwrap_or_default();
    emit(
        "networth.svg",
        backtest::svg_lines(
            "Net value",
            &["primal", "hedged"],
            &[column(&rows, 1, &nw)?, column(&rows, 2, &nw)?],
            (&first, &last),
        ),
    )?;

    let hr = dir.join("hedge_ratio.csv");
    let (_, rows) = read_table(&hr)?;
    emit(
        "hedge_ratio.svg",
        backtest::svg_lines("Hedge ratio", &["ratio"], &[column(&rows, 1, &hr)?], (&first, &last)),
    )?;

    let ph = dir.join("pnl_hist.csv");
    let (_, rows) = read_table(&ph)?;
    let lo = column(&rows, 0, &ph)?;
    let labels: Vec<String> = lo.iter().map(|v| format!("{v:.3}")).collect();
    emit(
        "pnl_hist.svg",
        backtest::svg_bars(
            "P&L histogram",
            &labels,
            &["primal", "hedged"],
            &[column(&rows, 2, &ph)?, column(&rows, 3, &ph)?],
        ),
    )?;

    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("metrics.json"))?)?;
    let get = |side: &str, key: &str| metrics[side][key].as_f64().unwrap_or(f64::NAN);
    emit(
        "metrics.svg",
        backtest::svg_bars(
            "1-step VaR and CVaR of net value changes",
            &["VaR".to_string(), "CVaR".to_string()],
            &["primal", "hedged"],
            &[
                vec![get("primal", "var99"), get("primal", "cvar99")],
                vec![get("hedged", "var99"), get("hedged", "cvar99")],
            ],
        ),
    )?;

    let lh = dir.join("loss_history.csv");
    if lh.is_file() {
        let (_, rows) = read_table(&lh)?;
        let n = rows.len().saturating_sub(1).to_string();
        emit("loss.svg", backtest::svg_lines("Training loss", &["loss"], &[column(&rows, 1, &lh)?], ("0", &n)))?;
    }
    Ok(format!("wrote {}\n", written.join(", ")))
}

/// Parses `args`, runs the command and returns the process exit code:
/// 0 success, 1 configuration error, 2 data error, 3 numerical failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run_cli(cli) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            let reason = e.to_string().replace('\n', " ");
            eprintln!("error kind={} reason={reason}", e.kind().as_str());
            match e.kind() {
                crate::ErrorKind::Config => 1,
                crate::ErrorKind::Data => 2,
                crate::ErrorKind::Numerical => 3,
            }
        }
    }
}

fn run_cli(cli: Cli) -> Result<String> {
    let threads = cli.threads;
    if threads == Some(0) {
        return Err(Error::InvalidConfig("--threads must be >= 1".into()));
    }
    let (command, cfg) = resolve(cli)?;
    match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
            pool.install(|| execute(&command, &cfg))
        }
        None => execute(&command, &cfg),
    }
}

/// Resolves defaults, the config file and flags into one command and config.
pub fn resolve(cli: Cli) -> Result<(String, RunConfig)> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let (name, manifest) = apply_flags(&mut cfg, cli.command)?;
    if let Some(path) = manifest {
        let m = Manifest::load(&path)?;
        let mut cfg = m.config;
        set(&mut cfg.out_dir, cli.out_dir);
        set(&mut cfg.seed, cli.seed);
        return Ok((m.command, cfg));
    }
    set(&mut cfg.out_dir, cli.out_dir);
    set(&mut cfg.seed, cli.seed);
    Ok((name.to_string(), cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> (String, RunConfig) {
        resolve(Cli::try_parse_from(args).unwrap()).unwrap()
    }

    #[test]
    fn defaults_then_flags() {
        let (cmd, cfg) = parse(&["tailhedge", "train", "--hidden", "32x32", "--iters", "7", "--seed", "3"]);
        assert_eq!(cmd, "train");
        assert_eq!(cfg.train.hidden, "32x32");
        assert_eq!(cfg.train.iterations, 7);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.scenarios, 1000);
    }

    #[test]
    fn config_file_sits_between_defaults_and_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"seed": 11, "train": {"iterations": 9, "alpha": 0.95}}"#).unwrap();
        let p = path.to_str().unwrap();
        let (_, cfg) = parse(&["tailhedge", "--config", p, "train", "--iters", "4"]);
        assert_eq!((cfg.seed, cfg.train.iterations, cfg.train.alpha), (11, 4, 0.95));
        std::fs::write(&path, r#"{"sed": 1}"#).unwrap();
        let err = resolve(Cli::try_parse_from(["tailhedge", "--config", p, "train"]).unwrap()).unwrap_err();
        assert_eq!(err.kind(), crate::ErrorKind::Config);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(["tailhedge", "frobnicate"]), 1);
        assert_eq!(run(["tailhedge", "risk", "--alpha", "0.99"]), 1);
        assert_eq!(run(["tailhedge", "risk", "--losses", "/nonexistent/losses.txt"]), 1);
    }

    #[test]
    fn loss_file_formats() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.txt");
        std::fs::write(&a, "loss\n1\n2.5\n\n-3\n").unwrap();
        assert_eq!(read_losses(&a).unwrap(), vec![1.0, 2.5, -3.0]);
        std::fs::write(&a, "1\nx\n").unwrap();
        assert!(matches!(read_losses(&a), Err(Error::MalformedRow { line: 2, .. })));
        std::fs::write(&a, "date,close\n2020-01-01,100\n2020-01-02,90\n").unwrap();
        let l = read_losses(&a).unwrap();
        assert!((l[0] - 0.1).abs() < 1e-15);
    }
}
