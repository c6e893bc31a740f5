//! Numerical laboratory for Ostwald ripening: Becker-Döring cluster
//! kinetics, the diffusive and classical Lifshitz-Slyozov-Wagner equations,
//! Monte Carlo first-passage estimates and coarsening diagnostics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bd;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod initial;
pub mod lsw_classical;
pub mod lsw_diffusive;
pub mod numeric;
pub mod rates;
pub mod sde;

pub use error::{Error, Result};
