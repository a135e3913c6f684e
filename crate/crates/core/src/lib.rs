//! Tail-risk hedging: CVaR-minimizing neural hedge policies trained on
//! block-bootstrapped scenarios, with a VaR/CVaR toolkit and a backtest
//! harness.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backtest;
pub mod bootstrap;
pub mod cli;
pub mod error;
pub mod marketdata;
pub mod neuralopt;
pub mod optim;
pub mod portfolio;
pub mod riskmeasures;

pub use error::{Error, ErrorKind, Result};
