//! Learns the aggregate price response of an EV fleet, forecasts its hourly
//! power, and derives market-compliant bid/offer curves.
//!
//! The pipeline: a fleet simulator synthesizes ground-truth charging data
//! ([`fleetsim`]); [`dataset`] turns price/power series into lagged,
//! standardized regressors; [`feasibility`] estimates aggregate power bounds
//! and [`optimality`] estimates blockwise marginal utilities, both as convex
//! programs over kernelized regressions ([`kernels`], [`qpsolve`]);
//! [`forward`] turns a fitted model into power forecasts and bid/offer
//! curves; [`tuning`] grid-searches the hyper-parameters and [`baselines`]
//! provides the reference forecasters and error metrics.

pub mod baselines;
pub mod dataset;
pub mod feasibility;
pub mod forward;
pub mod kernels;
pub mod model;
pub mod optimality;
pub mod linalg;
pub mod par;
pub mod qpsolve;
pub mod tuning;
