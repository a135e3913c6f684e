//! Multilayer perceptron hedge policy, analytic backpropagation, Adam and
//! the CVaR training loss over bootstrapped scenario panels.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{build_scenarios, BootstrapConfig, ScenarioSet};
use crate::error::{Error, Result};
use crate::marketdata::{to_returns, PriceSeries};
use crate::portfolio::{CostModel, CostSpec};
use crate::riskmeasures::tail_count;

/// Lagged returns fed to the policy at every anchor.
pub const DEFAULT_FEATURE_WINDOW: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative, with the ReLU subgradient at 0 taken as 0.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width, hidden widths, output width.
    pub widths: Vec<usize>,
    /// One tag per weight layer.
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        let spec = Self { widths, activations };
        spec.validate()?;
        Ok(spec)
    }

    /// ReLU hidden layers and an identity output layer.
    pub fn relu_net(input: usize, hidden: &[usize], output: usize) -> Result<Self> {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        let mut activations = vec![Activation::Relu; hidden.len()];
        activations.push(Activation::Identity);
        Self::new(widths, activations)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::InvalidConfig("an MLP needs input and output widths".into()));
        }
        if self.widths.contains(&0) {
            return Err(Error::InvalidConfig("layer widths must be >= 1".into()));
        }
        if self.activations.len() != self.widths.len() - 1 {
            return Err(Error::InvalidConfig(format!(
                "{} activations for {} layers",
                self.activations.len(),
                self.widths.len() - 1
            )));
        }
        if self.activations.last() != Some(&Activation::Identity) {
            return Err(Error::InvalidConfig("output activation must be identity".into()));
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated spec")
    }

    pub fn hidden(&self) -> &[usize] {
        &self.widths[1..self.widths.len() - 1]
    }
}

/// Parses hidden-layer shorthand such as `32x32`; `none` or an empty string
/// means no hidden layer.
pub fn parse_hidden(text: &str) -> Result<Vec<usize>> {
    let t = text.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("none") {
        return Ok(Vec::new());
    }
    t.split('x')
        .map(|w| {
            w.trim()
                .parse::<usize>()
                .ok()
                .filter(|&w| w > 0)
                .ok_or_else(|| Error::InvalidConfig(format!("bad hidden layer spec `{text}`")))
        })
        .collect()
}

pub fn format_hidden(hidden: &[usize]) -> String {
    if hidden.is_empty() {
        return "none".into();
    }
    hidden.iter().map(|w| w.to_string()).collect::<Vec<_>>().join("x")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// Row-major `out x in`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Layer {
    pub fn n_out(&self) -> usize {
        self.b.len()
    }

    pub fn n_in(&self) -> usize {
        self.w.len() / self.b.len().max(1)
    }
}

/// Weights and biases; also used for gradients of the same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl MlpParams {
    pub fn zeros(spec: &MlpSpec) -> Self {
        let layers = spec.widths.windows(2).map(|w| Layer { w: vec![0.0; w[0] * w[1]], b: vec![0.0; w[1]] }).collect();
        Self { layers }
    }

    pub fn check(&self, spec: &MlpSpec) -> Result<()> {
        if self.layers.len() != spec.n_layers() {
            return Err(Error::DimensionMismatch(format!(
                "{} parameter layers for {} spec layers",
                self.layers.len(),
                spec.n_layers()
            )));
        }
        for (k, (layer, w)) in self.layers.iter().zip(spec.widths.windows(2)).enumerate() {
            if layer.b.len() != w[1] || layer.w.len() != w[0] * w[1] {
                return Err(Error::DimensionMismatch(format!("layer {k} shape differs from spec")));
            }
        }
        if self.values().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("parameters"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every entry, layer by layer, weights before biases.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(l.b.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.w.iter_mut().chain(l.b.iter_mut()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        for (p, v) in self.values_mut().zip(flat) {
            *p = *v;
        }
    }

    fn add_assign(&mut self, other: &MlpParams) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += b;
        }
    }
}

/// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
pub fn init_params(spec: &MlpSpec, seed: u64) -> MlpParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = MlpParams::zeros(spec);
    for (layer, w) in params.layers.iter_mut().zip(spec.widths.windows(2)) {
        let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
        for x in layer.w.iter_mut() {
            *x = rng.random_range(-bound..bound);
        }
    }
    params
}

/// Layer inputs and pre-activations recorded by [`forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    pub inputs: Vec<Vec<f64>>,
    pub pre_activations: Vec<Vec<f64>>,
}

pub fn forward(params: &MlpParams, spec: &MlpSpec, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
    if params.layers.len() != spec.n_layers() {
        return Err(Error::DimensionMismatch("parameters do not match spec".into()));
    }
    if x.len() != spec.input_width() {
        return Err(Error::DimensionMismatch(format!(
            "input of width {} for a net expecting {}",
            x.len(),
            spec.input_width()
        )));
    }
    let mut inputs = Vec::with_capacity(spec.n_layers());
    let mut pre = Vec::with_capacity(spec.n_layers());
    let mut y = x.to_vec();
    for (layer, act) in params.layers.iter().zip(&spec.activations) {
        let n_in = y.len();
        if layer.w.len() != layer.n_out() * n_in {
            return Err(Error::DimensionMismatch("layer shape does not match its input".into()));
        }
        let z: Vec<f64> = (0..layer.n_out())
            .map(|o| {
                let row = &layer.w[o * n_in..(o + 1) * n_in];
                row.iter().zip(&y).map(|(w, v)| w * v).sum::<f64>() + layer.b[o]
            })
            .collect();
        let next = z.iter().map(|&v| act.apply(v)).collect();
        inputs.push(std::mem::replace(&mut y, next));
        pre.push(z);
    }
    Ok((y, ForwardCache { inputs, pre_activations: pre }))
}

/// Gradients of a scalar loss with respect to every parameter, given its
/// gradient `upstream` with respect to the network output.
pub fn backward(params: &MlpParams, spec: &MlpSpec, cache: &ForwardCache, upstream: &[f64]) -> Result<MlpParams> {
    let n = spec.n_layers();
    if cache.inputs.len() != n || cache.pre_activations.len() != n || params.layers.len() != n {
        return Err(Error::DimensionMismatch("cache does not match the network".into()));
    }
    for (k, layer) in params.layers.iter().enumerate() {
        if cache.inputs[k].len() != spec.widths[k] || cache.pre_activations[k].len() != layer.n_out() {
            return Err(Error::DimensionMismatch(format!("stale cache at layer {k}")));
        }
    }
    if upstream.len() != spec.output_width() {
        return Err(Error::DimensionMismatch("upstream gradient width".into()));
    }
    let mut grads = MlpParams::zeros(spec);
    let mut delta = upstream.to_vec();
    for k in (0..n).rev() {
        let layer = &params.layers[k];
        let act = spec.activations[k];
        let z = &cache.pre_activations[k];
        for (d, zv) in delta.iter_mut().zip(z) {
            *d *= act.derivative(*zv);
        }
        let input = &cache.inputs[k];
        let n_in = input.len();
        let g = &mut grads.layers[k];
        for (o, d) in delta.iter().enumerate() {
            g.b[o] = *d;
            if *d != 0.0 {
                for (gw, x) in g.w[o * n_in..(o + 1) * n_in].iter_mut().zip(input) {
                    *gw = d * x;
                }
            }
        }
        if k > 0 {
            let mut prev = vec![0.0; n_in];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                for (p, w) in prev.iter_mut().zip(&layer.w[o * n_in..(o + 1) * n_in]) {
                    *p += d * w;
                }
            }
            delta = prev;
        }
    }
    Ok(grads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self::with_betas(n_params, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(n_params: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0, beta1, beta2, eps, lr }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.lr > 0.0
            && self.lr.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig("Adam needs 0 <= beta < 1, eps > 0, lr > 0".into()))
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut MlpParams, grads: &MlpParams, state: &mut AdamState) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::DimensionMismatch("Adam state and parameter shapes differ".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2) = (state.beta1, state.beta2);
    for (((p, g), m), v) in params.values_mut().zip(grads.values()).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// An MLP mapping the trailing `feature_window` returns of each feature
/// asset to units of each hedge instrument.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HedgePolicy {
    pub spec: MlpSpec,
    pub params: MlpParams,
    pub feature_window: usize,
    pub n_instruments: usize,
    pub seed: u64,
}

impl HedgePolicy {
    /// Freshly initialized policy reading one feature asset.
    pub fn new(hidden: &[usize], feature_window: usize, n_instruments: usize, seed: u64) -> Result<Self> {
        let spec = MlpSpec::relu_net(feature_window, hidden, n_instruments)?;
        let params = init_params(&spec, seed);
        let policy = Self { spec, params, feature_window, n_instruments, seed };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.params.check(&self.spec)?;
        if self.feature_window < 1 || !self.spec.input_width().is_multiple_of(self.feature_window) {
            return Err(Error::InvalidConfig(format!(
                "input width {} is not a multiple of the feature window {}",
                self.spec.input_width(),
                self.feature_window
            )));
        }
        if self.spec.output_width() != self.n_instruments {
            return Err(Error::InvalidConfig(format!(
                "output width {} but {} hedge instruments",
                self.spec.output_width(),
                self.n_instruments
            )));
        }
        Ok(())
    }

    pub fn n_feature_assets(&self) -> usize {
        self.spec.input_width() / self.feature_window
    }

    /// Hedge units for one feature vector.
    pub fn act(&self, features: &[f64]) -> Result<Vec<f64>> {
        Ok(forward(&self.params, &self.spec, features)?.0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let policy: HedgePolicy = serde_json::from_str(text)?;
        policy.validate()?;
        Ok(policy)
    }
}

impl fmt::Display for HedgePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "mlp[{}] W={} d={}", format_hidden(self.spec.hidden()), self.feature_window, self.n_instruments)
    }
}

/// Trailing returns `returns[p - w .. p]` of every feature series: the
/// information available at price index `p`.
pub fn features_at(feature_returns: &[&[f64]], p: usize, w: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(w * feature_returns.len());
    for r in feature_returns {
        if p < w || p > r.len() {
            return Err(Error::InvalidConfig(format!("no {w}-return window ends at price index {p}")));
        }
        out.extend_from_slice(&r[p - w..p]);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub alpha: f64,
    pub scenarios: usize,
    /// Steps per scenario path (1 = one-day loss).
    pub tau_steps: usize,
    /// Constant units of the primary asset.
    pub primary_units: f64,
    pub seed: u64,
    pub cost: CostSpec,
    /// Step size multiplier applied when an update raises the loss and is
    /// rolled back. 1 disables the rollback.
    #[serde(default = "default_backoff")]
    pub backoff: f64,
}

fn default_backoff() -> f64 {
    DEFAULT_BACKOFF
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 50,
            learning_rate: DEFAULT_LEARNING_RATE,
            alpha: 0.99,
            scenarios: 1000,
            tau_steps: 1,
            primary_units: 1.0,
            seed: 0,
            cost: CostSpec::default(),
            backoff: DEFAULT_BACKOFF,
        }
    }
}

/// Default Adam step size. Features are raw daily returns, so hedge units
/// are driven mostly by the biases, and 50 steps of 1e-3 move them by 0.05
/// at most.
pub const DEFAULT_LEARNING_RATE: f64 = 0.03;

/// The CVaR loss is piecewise linear in the hedge, so a constant step keeps
/// overshooting the optimum with Adam's momentum. Rolling back and halving
/// on every rise damps that.
pub const DEFAULT_BACKOFF: f64 = 0.5;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        crate::riskmeasures::check_alpha(self.alpha)?;
        if self.iterations < 1 {
            return Err(Error::InvalidConfig("iterations must be >= 1".into()));
        }
        if self.scenarios < 100 {
            return Err(Error::InvalidConfig(format!("scenarios {} < 100", self.scenarios)));
        }
        if self.tau_steps < 1 {
            return Err(Error::InvalidConfig("tau_steps must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be > 0".into()));
        }
        if !(self.backoff > 0.0 && self.backoff <= 1.0) {
            return Err(Error::InvalidConfig(format!("backoff {} outside (0, 1]", self.backoff)));
        }
        if !self.primary_units.is_finite() {
            return Err(Error::NonFinite("primary units"));
        }
        self.cost.validate()
    }
}

/// Scenario price changes at one anchor, ready for the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorPanel {
    pub origin_index: usize,
    pub features: Vec<f64>,
    /// Primary price change per scenario.
    pub ds_primary: Vec<f64>,
    /// Per hedge instrument, price change per scenario.
    pub ds_hedge: Vec<Vec<f64>>,
    /// Hedge instrument prices at the anchor, used for costs.
    pub hedge_prices: Vec<f64>,
}

impl AnchorPanel {
    pub fn m(&self) -> usize {
        self.ds_primary.len()
    }

    /// Price changes `S_p * (prod(1 + r) - 1)` from a panel whose asset 0 is
    /// the primary and assets `1..` the hedge instruments.
    pub fn from_scenarios(set: &ScenarioSet, features: Vec<f64>, prices_at_anchor: &[f64]) -> Result<Self> {
        if prices_at_anchor.len() != set.n_assets() || set.n_assets() < 2 {
            return Err(Error::DimensionMismatch(format!(
                "{} anchor prices for a {}-asset panel",
                prices_at_anchor.len(),
                set.n_assets()
            )));
        }
        let ds =
            |a: usize| -> Vec<f64> { set.compounded_all(a).into_iter().map(|g| prices_at_anchor[a] * g).collect() };
        Ok(Self {
            origin_index: set.origin_index,
            features,
            ds_primary: ds(0),
            ds_hedge: (1..set.n_assets()).map(ds).collect(),
            hedge_prices: prices_at_anchor[1..].to_vec(),
        })
    }
}

/// Anchor panels in increasing origin order. Explicit costs at each anchor
/// are charged on the change from the previous anchor's hedge (zero before
/// the first).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub panels: Vec<AnchorPanel>,
    pub primary_units: f64,
    pub alpha: f64,
    pub cost: CostSpec,
}

impl TrainingBatch {
    pub fn new(mut panels: Vec<AnchorPanel>, primary_units: f64, alpha: f64, cost: CostSpec) -> Result<Self> {
        crate::riskmeasures::check_alpha(alpha)?;
        if panels.is_empty() {
            return Err(Error::EmptyInput("scenario panels"));
        }
        let m = panels[0].m();
        let d = panels[0].ds_hedge.len();
        for p in &panels {
            if p.m() == 0 {
                return Err(Error::EmptyInput("scenario panel"));
            }
            if p.m() != m || p.ds_hedge.len() != d || p.hedge_prices.len() != d {
                return Err(Error::DimensionMismatch("panels differ in shape".into()));
            }
            if p.ds_hedge.iter().any(|h| h.len() != m) {
                return Err(Error::DimensionMismatch("hedge scenarios differ in count".into()));
            }
        }
        panels.sort_by_key(|p| p.origin_index);
        Ok(Self { panels, primary_units, alpha, cost })
    }

    pub fn m(&self) -> usize {
        self.panels[0].m()
    }

    pub fn n_instruments(&self) -> usize {
        self.panels[0].ds_hedge.len()
    }

    pub fn k(&self) -> usize {
        tail_count(self.alpha, self.m())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub loss: f64,
    pub grads: MlpParams,
    /// Per-anchor CVaR including costs.
    pub panel_cvar: Vec<f64>,
    /// Per-anchor scenario indices of the k largest losses, largest first.
    pub tails: Vec<Vec<usize>>,
}

/// Scenario losses `-(n_C dS_C + h . dS_H) + cost` of one panel.
pub fn scenario_losses(panel: &AnchorPanel, primary_units: f64, h: &[f64], cost: f64) -> Vec<f64> {
    (0..panel.m())
        .map(|j| {
            let hedge: f64 = h.iter().zip(&panel.ds_hedge).map(|(u, ds)| u * ds[j]).sum();
            -(primary_units * panel.ds_primary[j] + hedge) + cost
        })
        .collect()
}

/// Indices of the `k` largest losses, largest first; ties keep scenario order.
pub fn tail_indices(losses: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..losses.len()).collect();
    idx.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]));
    idx.truncate(k);
    idx
}

fn tree_sum(mut parts: Vec<MlpParams>) -> Option<MlpParams> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.add_assign(&b);
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop()
}

/// Mean over anchors of the panel CVaR of scenario losses, with the
/// tail-mean subgradient with respect to the policy parameters.
pub fn cvar_loss(policy: &HedgePolicy, batch: &TrainingBatch) -> Result<LossEval> {
    if batch.n_instruments() != policy.n_instruments {
        return Err(Error::DimensionMismatch(format!(
            "policy hedges {} instruments, batch has {}",
            policy.n_instruments,
            batch.n_instruments()
        )));
    }
    let k = batch.k();
    let n_anchor = batch.panels.len();
    let d = policy.n_instruments;

    let outputs: Vec<(Vec<f64>, ForwardCache)> =
        batch.panels.par_iter().map(|p| forward(&policy.params, &policy.spec, &p.features)).collect::<Result<_>>()?;

    let zero_hedge = vec![0.0; d];
    let mut upstream = vec![vec![0.0; d]; n_anchor];
    let mut panel_cvar = Vec::with_capacity(n_anchor);
    let mut tails = Vec::with_capacity(n_anchor);
    let scale = 1.0 / n_anchor as f64;
    for (i, panel) in batch.panels.iter().enumerate() {
        let h = &outputs[i].0;
        let h_prev = if i == 0 { &zero_hedge } else { &outputs[i - 1].0 };
        let dh: Vec<f64> = h.iter().zip(h_prev).map(|(a, b)| a - b).collect();
        let cost = batch.cost.cost(&dh, &panel.hedge_prices)?;
        let losses = scenario_losses(panel, batch.primary_units, h, cost);
        let tail = tail_indices(&losses, k);
        let mut sum = 0.0;
        for &j in &tail {
            sum += losses[j];
        }
        panel_cvar.push(sum / k as f64);

        let cost_grad = batch.cost.gradient(&dh, &panel.hedge_prices);
        for a in 0..d {
            let tail_ds: f64 = tail.iter().map(|&j| panel.ds_hedge[a][j]).sum::<f64>() / k as f64;
            upstream[i][a] += scale * (cost_grad[a] - tail_ds);
            if i > 0 {
                upstream[i - 1][a] -= scale * cost_grad[a];
            }
        }
        tails.push(tail);
    }

    let parts: Vec<MlpParams> = outputs
        .par_iter()
        .zip(upstream.par_iter())
        .map(|((_, cache), g)| backward(&policy.params, &policy.spec, cache, g))
        .collect::<Result<_>>()?;
    let grads = tree_sum(parts).unwrap_or_else(|| MlpParams::zeros(&policy.spec));

    let mut loss = 0.0;
    for c in &panel_cvar {
        loss += c;
    }
    loss /= n_anchor as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cvar loss"));
    }
    Ok(LossEval { loss, grads, panel_cvar, tails })
}

/// Aligned training prices: asset 0 is the primary, the rest hedge
/// instruments. A policy hedging an asset with itself takes the same
/// series twice.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub primary: PriceSeries,
    pub hedges: Vec<PriceSeries>,
}

impl TrainingData {
    pub fn new(primary: PriceSeries, hedges: Vec<PriceSeries>) -> Result<Self> {
        if hedges.is_empty() {
            return Err(Error::InvalidConfig("at least one hedge instrument is required".into()));
        }
        for h in &hedges {
            if h.dates() != primary.dates() {
                return Err(Error::DateMisalignment(format!(
                    "{} and {} have different dates",
                    primary.asset_id(),
                    h.asset_id()
                )));
            }
        }
        Ok(Self { primary, hedges })
    }

    pub fn self_hedge(primary: PriceSeries) -> Self {
        let hedge = primary.clone();
        Self { primary, hedges: vec![hedge] }
    }

    pub fn n_prices(&self) -> usize {
        self.primary.len()
    }

    /// Every price index with a full feature window behind it.
    pub fn default_anchors(&self, feature_window: usize) -> Vec<usize> {
        (feature_window..self.n_prices()).collect()
    }
}

/// Builds the fixed panels of a run: one scenario set per anchor resampled
/// from the whole training return history.
pub fn build_batch(
    policy: &HedgePolicy,
    data: &TrainingData,
    anchors: &[usize],
    cfg: &TrainConfig,
    boot: &BootstrapConfig,
) -> Result<(TrainingBatch, Vec<ScenarioSet>)> {
    cfg.validate()?;
    if policy.n_feature_assets() != 1 {
        return Err(Error::InvalidConfig("policies read the primary asset's returns only".into()));
    }
    if data.hedges.len() != policy.n_instruments {
        return Err(Error::DimensionMismatch(format!(
            "{} hedge series for a policy with {} outputs",
            data.hedges.len(),
            policy.n_instruments
        )));
    }
    if anchors.is_empty() {
        return Err(Error::EmptyInput("anchors"));
    }
    let w = policy.feature_window;
    let n = data.n_prices();
    if let Some(&bad) = anchors.iter().find(|&&p| p < w || p >= n) {
        return Err(Error::TooFewObservations { found: n, required: bad.max(w) + 1 });
    }
    let returns: Vec<Vec<f64>> =
        std::iter::once(&data.primary).chain(&data.hedges).map(|s| to_returns(s).values().to_vec()).collect();
    let sources: Vec<&[f64]> = returns.iter().map(|r| r.as_slice()).collect();
    let boot = BootstrapConfig { seed: cfg.seed, ..*boot };
    let sets = build_scenarios(&sources, anchors, cfg.scenarios, cfg.tau_steps, &boot)?;

    let panels = sets
        .iter()
        .map(|set| {
            let p = set.origin_index;
            let features = features_at(&sources[..1], p, w)?;
            let prices: Vec<f64> = std::iter::once(&data.primary).chain(&data.hedges).map(|s| s.closes()[p]).collect();
            AnchorPanel::from_scenarios(set, features, &prices)
        })
        .collect::<Result<Vec<_>>>()?;
    let batch = TrainingBatch::new(panels, cfg.primary_units, cfg.alpha, cfg.cost)?;
    Ok((batch, sets))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub policy: HedgePolicy,
    /// Loss before each of the `iterations` updates.
    pub losses: Vec<f64>,
    /// Loss after the last update.
    pub final_loss: f64,
}

/// Full-batch Adam on fixed panels. When an update raises the loss it is
/// rejected: parameters go back to the last accepted point, the step size is
/// multiplied by `cfg.backoff` and the first moment is cleared.
pub fn train_on_batch(policy: &HedgePolicy, batch: &TrainingBatch, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    policy.validate()?;
    let backtrack = cfg.backoff < 1.0;
    let mut policy = policy.clone();
    let mut adam = AdamState::new(policy.params.len(), cfg.learning_rate);
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut accepted: Option<(MlpParams, LossEval)> = None;
    for it in 0..cfg.iterations {
        let mut eval = cvar_loss(&policy, batch)?;
        match &accepted {
            Some((params, best)) if backtrack && eval.loss > best.loss => {
                log::debug!("iteration {it}: rejected loss {:.6e}", eval.loss);
                policy.params = params.clone();
                eval = best.clone();
                adam.lr *= cfg.backoff;
                adam.m.iter_mut().for_each(|m| *m = 0.0);
            }
            _ if backtrack => accepted = Some((policy.params.clone(), eval.clone())),
            _ => {}
        }
        log::debug!("iteration {it}: loss {:.6e} lr {:.3e}", eval.loss, adam.lr);
        losses.push(eval.loss);
        adam_step(&mut policy.params, &eval.grads, &mut adam)?;
        if policy.params.values().any(|x| !x.is_finite()) {
            return Err(Error::NonConvergence { iterations: it + 1 });
        }
    }
    let mut final_loss = cvar_loss(&policy, batch)?.loss;
    if let Some((params, best)) = accepted {
        if final_loss > best.loss {
            policy.params = params;
            final_loss = best.loss;
        }
    }
    Ok(TrainOutcome { policy, losses, final_loss })
}

/// Builds the panels once and trains on them.
pub fn train(
    policy: &HedgePolicy,
    data: &TrainingData,
    anchors: &[usize],
    cfg: &TrainConfig,
    boot: &BootstrapConfig,
) -> Result<TrainOutcome> {
    let (batch, _) = build_batch(policy, data, anchors, cfg, boot)?;
    train_on_batch(policy, &batch, cfg)
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::InvalidConfig(format!("unknown activation `{other}`"))),
        }
    }
}
