//! Naive, simple-block, moving-block and stationary bootstrap resampling,
//! plus the per-anchor counterfactual scenario panels used for training.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapMethod {
    Naive,
    SimpleBlock,
    MovingBlock,
    Stationary,
}

impl BootstrapMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            BootstrapMethod::Naive => "naive",
            BootstrapMethod::SimpleBlock => "simple_block",
            BootstrapMethod::MovingBlock => "moving_block",
            BootstrapMethod::Stationary => "stationary",
        }
    }
}

impl fmt::Display for BootstrapMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BootstrapMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(BootstrapMethod::Naive),
            "simple_block" => Ok(BootstrapMethod::SimpleBlock),
            "moving_block" => Ok(BootstrapMethod::MovingBlock),
            "stationary" => Ok(BootstrapMethod::Stationary),
            other => Err(Error::InvalidConfig(format!("unknown bootstrap method `{other}`"))),
        }
    }
}

/// Resampling parameters. For the stationary bootstrap `block_len` is the
/// mean block length and the restart probability is `1 / block_len`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub method: BootstrapMethod,
    pub block_len: usize,
    pub out_len: usize,
    pub seed: u64,
}

impl BootstrapConfig {
    pub fn new(method: BootstrapMethod, block_len: usize, out_len: usize, seed: u64) -> Self {
        Self { method, block_len, out_len, seed }
    }

    /// Moving-block with the cube-root heuristic block length for `n` points.
    pub fn default_for(n: usize, out_len: usize, seed: u64) -> Self {
        Self::new(BootstrapMethod::MovingBlock, heuristic_block_length(n), out_len, seed)
    }

    pub fn validate(&self, source_len: usize) -> Result<()> {
        if source_len == 0 {
            return Err(Error::EmptyInput("bootstrap source"));
        }
        if self.block_len < 1 {
            return Err(Error::InvalidConfig("block length must be >= 1".into()));
        }
        if self.block_len > source_len {
            return Err(Error::BlockTooLong { block_len: self.block_len, len: source_len });
        }
        if self.out_len < 1 {
            return Err(Error::InvalidConfig("output length must be >= 1".into()));
        }
        Ok(())
    }
}

/// `floor(n^(1/3))`, at least 1.
pub fn heuristic_block_length(n: usize) -> usize {
    if n == 0 {
        return 1;
    }
    let mut r = (n as f64).cbrt().round() as usize;
    while r > 0 && r.saturating_mul(r).saturating_mul(r) > n {
        r -= 1;
    }
    while (r + 1).saturating_mul(r + 1).saturating_mul(r + 1) <= n {
        r += 1;
    }
    r.max(1)
}

/// A run of consecutive source indices `start, start+1, ...` taken modulo
/// the source length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub start: usize,
    pub len: usize,
}

/// Draws the block structure of one resample of a length-`n` source.
/// Block lengths sum to exactly `cfg.out_len`.
pub fn resample_blocks<R: Rng + ?Sized>(n: usize, cfg: &BootstrapConfig, rng: &mut R) -> Result<Vec<Block>> {
    cfg.validate(n)?;
    let l = cfg.block_len;
    let mut remaining = cfg.out_len;
    let mut blocks = Vec::new();
    match cfg.method {
        BootstrapMethod::Naive => {
            blocks.extend((0..remaining).map(|_| Block { start: rng.random_range(0..n), len: 1 }));
        }
        BootstrapMethod::SimpleBlock => {
            let count = n / l;
            while remaining > 0 {
                let len = l.min(remaining);
                blocks.push(Block { start: rng.random_range(0..count) * l, len });
                remaining -= len;
            }
        }
        BootstrapMethod::MovingBlock => {
            let count = n - l + 1;
            while remaining > 0 {
                let len = l.min(remaining);
                blocks.push(Block { start: rng.random_range(0..count), len });
                remaining -= len;
            }
        }
        BootstrapMethod::Stationary => {
            let p = 1.0 / l as f64;
            let mut current = Block { start: rng.random_range(0..n), len: 1 };
            remaining -= 1;
            while remaining > 0 {
                if rng.random::<f64>() < p {
                    blocks.push(current);
                    current = Block { start: rng.random_range(0..n), len: 1 };
                } else {
                    current.len += 1;
                }
                remaining -= 1;
            }
            blocks.push(current);
        }
    }
    Ok(blocks)
}

/// Source indices of one resample, `cfg.out_len` long.
pub fn resample_indices<R: Rng + ?Sized>(n: usize, cfg: &BootstrapConfig, rng: &mut R) -> Result<Vec<usize>> {
    let blocks = resample_blocks(n, cfg, rng)?;
    let mut out = Vec::with_capacity(cfg.out_len);
    for b in blocks {
        out.extend((0..b.len).map(|i| (b.start + i) % n));
    }
    Ok(out)
}

/// Resamples `values` according to `cfg`, seeded from `cfg.seed`.
pub fn resample(values: &[f64], cfg: &BootstrapConfig) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(resample_indices(values.len(), cfg, &mut rng)?.into_iter().map(|i| values[i]).collect())
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG for scenario `row` of the panel anchored at `anchor`.
pub fn scenario_rng(seed: u64, anchor: usize, row: usize) -> ChaCha8Rng {
    let key = splitmix64(seed ^ splitmix64(anchor as u64 ^ 0xA5A5_5A5A_0F0F_F0F0));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(row as u64);
    rng
}

/// `prod(1 + r) - 1`, accumulated as `g + r + g r` so a single step returns
/// `r` exactly.
pub fn compound_returns(returns: &[f64]) -> f64 {
    returns.iter().fold(0.0, |g, r| g + r + g * r)
}

/// `m` counterfactual return paths of `tau_steps` steps for every asset,
/// anchored at one position of the empirical series.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSet {
    pub origin_index: usize,
    pub m: usize,
    pub tau_steps: usize,
    /// One row-major `m x tau_steps` matrix per asset.
    pub panel: Vec<Vec<f64>>,
}

impl ScenarioSet {
    pub fn n_assets(&self) -> usize {
        self.panel.len()
    }

    /// Returns of scenario `j` for `asset`.
    pub fn path(&self, asset: usize, j: usize) -> &[f64] {
        &self.panel[asset][j * self.tau_steps..(j + 1) * self.tau_steps]
    }

    /// Compounded horizon return `prod(1 + r) - 1` of scenario `j`.
    pub fn compounded(&self, asset: usize, j: usize) -> f64 {
        compound_returns(self.path(asset, j))
    }

    /// Compounded horizon returns of every scenario for `asset`.
    pub fn compounded_all(&self, asset: usize) -> Vec<f64> {
        (0..self.m).map(|j| self.compounded(asset, j)).collect()
    }
}

/// Builds one scenario panel per anchor. Each row is an independent
/// `tau_steps` resample of the aligned `sources`; the same source indices
/// are applied to every asset so cross-asset alignment is kept.
///
/// `cfg.out_len` is ignored in favour of `tau_steps`. Row `j` of the panel
/// at anchor `a` is drawn from `scenario_rng(cfg.seed, a, j)`.
pub fn build_scenarios(
    sources: &[&[f64]],
    anchors: &[usize],
    m: usize,
    tau_steps: usize,
    cfg: &BootstrapConfig,
) -> Result<Vec<ScenarioSet>> {
    let Some(first) = sources.first() else {
        return Err(Error::EmptyInput("scenario sources"));
    };
    let n = first.len();
    if sources.iter().any(|s| s.len() != n) {
        return Err(Error::DimensionMismatch("scenario sources differ in length".into()));
    }
    if sources.iter().flat_map(|s| s.iter()).any(|r| !(r.is_finite() && *r > -1.0)) {
        return Err(Error::InvalidConfig("source returns must be finite and > -1".into()));
    }
    if m < 1 || tau_steps < 1 {
        return Err(Error::InvalidConfig("m and tau_steps must be >= 1".into()));
    }
    let row_cfg = BootstrapConfig { out_len: tau_steps, ..*cfg };
    row_cfg.validate(n)?;

    anchors
        .par_iter()
        .map(|&anchor| {
            let mut panel = vec![Vec::with_capacity(m * tau_steps); sources.len()];
            for row in 0..m {
                let mut rng = scenario_rng(cfg.seed, anchor, row);
                let idx = resample_indices(n, &row_cfg, &mut rng)?;
                for (asset, src) in sources.iter().enumerate() {
                    panel[asset].extend(idx.iter().map(|&i| src[i]));
                }
            }
            Ok(ScenarioSet { origin_index: anchor, m, tau_steps, panel })
        })
        .collect()
}
