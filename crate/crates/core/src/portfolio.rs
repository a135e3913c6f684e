//! Portfolio P&L algebra: return decomposition into unrealized P&L,
//! realized cashflow and implicit trading costs, hedged-portfolio returns,
//! explicit costs and the hedged loss variable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn dot(a: &[f64], b: &[f64], what: &str) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!("{what}: {} vs {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Holdings {
    pub primary_units: Vec<f64>,
    pub hedge_units: Vec<f64>,
}

impl Holdings {
    pub fn new(primary_units: Vec<f64>, hedge_units: Vec<f64>) -> Result<Self> {
        if primary_units.iter().chain(&hedge_units).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("holdings"));
        }
        Ok(Self { primary_units, hedge_units })
    }
}

/// Something that charges explicit (cash-account) costs for a rebalance.
pub trait CostModel {
    /// Cost in currency of trading `dn` units at prices `s`.
    fn cost(&self, dn: &[f64], s: &[f64]) -> Result<f64>;

    /// Subgradient of the cost with respect to `dn`.
    fn gradient(&self, dn: &[f64], s: &[f64]) -> Vec<f64>;
}

/// Proportional-plus-fixed cost schedule.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostSpec {
    /// Fraction of traded notional (0.001 = 10 bp).
    #[serde(default)]
    pub proportional_rate: f64,
    /// Currency charged once per rebalance that trades anything.
    #[serde(default)]
    pub fixed_fee: f64,
}

impl CostSpec {
    pub fn new(proportional_rate: f64, fixed_fee: f64) -> Result<Self> {
        let spec = Self { proportional_rate, fixed_fee };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.proportional_rate >= 0.0 && self.fixed_fee >= 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidConfig("cost rates must be >= 0".into()))
        }
    }

    pub fn is_zero(&self) -> bool {
        self.proportional_rate == 0.0 && self.fixed_fee == 0.0
    }
}

impl CostModel for CostSpec {
    fn cost(&self, dn: &[f64], s: &[f64]) -> Result<f64> {
        explicit_costs(self, dn, s)
    }

    fn gradient(&self, dn: &[f64], s: &[f64]) -> Vec<f64> {
        dn.iter()
            .zip(s)
            .map(|(d, p)| if *d == 0.0 { 0.0 } else { self.proportional_rate * d.signum() * p.abs() })
            .collect()
    }
}

/// `proportional_rate * sum |dn_i| s_i`, plus `fixed_fee` when anything trades.
pub fn explicit_costs(spec: &CostSpec, dn: &[f64], s: &[f64]) -> Result<f64> {
    if dn.len() != s.len() {
        return Err(Error::DimensionMismatch(format!("costs: {} vs {}", dn.len(), s.len())));
    }
    let notional: f64 = dn.iter().zip(s).map(|(d, p)| d.abs() * p.abs()).sum();
    let fee = if dn.iter().any(|d| *d != 0.0) { spec.fixed_fee } else { 0.0 };
    Ok(spec.proportional_rate * notional + fee)
}

/// Loss of the hedged portfolio over one interval, positive when value is lost.
pub fn loss_variable(v_start: f64, v_end: f64, costs: f64) -> f64 {
    -v_end + v_start + costs
}

/// Three-way split of a portfolio's value change, in currency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PnlDecomposition {
    pub unrealized: f64,
    pub realized_cashflow: f64,
    pub implicit_costs: f64,
    pub total_return: f64,
    pub initial_value: f64,
}

/// Splits the return of holdings `n_prev` at prices `s_prev`, rebalanced by
/// `dn` while prices move by `ds`.
pub fn decompose_return(n_prev: &[f64], dn: &[f64], s_prev: &[f64], ds: &[f64]) -> Result<PnlDecomposition> {
    let v0 = dot(n_prev, s_prev, "holdings/prices")?;
    if v0 == 0.0 {
        return Err(Error::ZeroValue);
    }
    let unrealized = dot(n_prev, ds, "holdings/price changes")?;
    let realized_cashflow = dot(dn, s_prev, "trades/prices")?;
    let implicit_costs = dot(dn, ds, "trades/price changes")?;
    let v1 = dot(&add(n_prev, dn), &add(s_prev, ds), "terminal")?;
    Ok(PnlDecomposition {
        unrealized,
        realized_cashflow,
        implicit_costs,
        total_return: v1 / v0 - 1.0,
        initial_value: v0,
    })
}

/// Six-way split of a hedged portfolio's return; every component is a
/// fraction of the combined initial value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HedgedDecomposition {
    pub primary_unrealized: f64,
    pub hedging_unrealized: f64,
    pub primary_realized: f64,
    pub hedging_realized: f64,
    pub primary_implicit: f64,
    pub hedging_implicit: f64,
    pub total_return: f64,
    pub initial_value: f64,
}

impl HedgedDecomposition {
    pub fn component_sum(&self) -> f64 {
        self.primary_unrealized
            + self.hedging_unrealized
            + self.primary_realized
            + self.hedging_realized
            + self.primary_implicit
            + self.hedging_implicit
    }
}

#[allow(clippy::too_many_arguments)]
pub fn hedged_return(
    holdings: &Holdings,
    dn_c: &[f64],
    dn_h: &[f64],
    s_c: &[f64],
    s_h: &[f64],
    ds_c: &[f64],
    ds_h: &[f64],
) -> Result<HedgedDecomposition> {
    let n_c = &holdings.primary_units;
    let n_h = &holdings.hedge_units;
    let v0 = dot(n_c, s_c, "primary")? + dot(n_h, s_h, "hedging")?;
    if v0 == 0.0 {
        return Err(Error::ZeroValue);
    }
    let v1 = dot(&add(n_c, dn_c), &add(s_c, ds_c), "primary terminal")?
        + dot(&add(n_h, dn_h), &add(s_h, ds_h), "hedging terminal")?;
    Ok(HedgedDecomposition {
        primary_unrealized: dot(n_c, ds_c, "primary")? / v0,
        hedging_unrealized: dot(n_h, ds_h, "hedging")? / v0,
        primary_realized: dot(dn_c, s_c, "primary trades")? / v0,
        hedging_realized: dot(dn_h, s_h, "hedging trades")? / v0,
        primary_implicit: dot(dn_c, ds_c, "primary trades")? / v0,
        hedging_implicit: dot(dn_h, ds_h, "hedging trades")? / v0,
        total_return: v1 / v0 - 1.0,
        initial_value: v0,
    })
}

/// Hedged return when the hedge trades the primary assets themselves;
/// `n_hedged` and `dn_hedged` are the combined primary-plus-hedge units.
pub fn hedged_return_same_asset(n_hedged: &[f64], dn_hedged: &[f64], s: &[f64], ds: &[f64]) -> Result<f64> {
    let v0 = dot(n_hedged, s, "holdings/prices")?;
    if v0 == 0.0 {
        return Err(Error::ZeroValue);
    }
    let hold = dot(n_hedged, ds, "holdings/price changes")?;
    let trade = dot(dn_hedged, &add(s, ds), "trades/terminal prices")?;
    Ok((hold + trade) / v0)
}

/// Return in weight space: `omega . r_c + pi . r_h`.
pub fn weights_return(omega: &[f64], pi: &[f64], r_c: &[f64], r_h: &[f64]) -> Result<f64> {
    Ok(dot(omega, r_c, "primary weights")? + dot(pi, r_h, "hedge weights")?)
}
