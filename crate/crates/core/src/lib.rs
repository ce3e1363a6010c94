//! Adaptive marginal-cost tolling on parallel-link networks: logit equilibria,
//! the stochastic load/toll process and its two-timescale ODE limit.

// `!(v > 0.0)` is deliberate throughout: NaN must fail every positivity check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Link-indexed loops over several parallel arrays read better with an index.
#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod diagnostics;
pub mod dynamics;
pub mod equilibrium;
pub mod error;
pub mod network;
pub mod ode;
pub mod series;
