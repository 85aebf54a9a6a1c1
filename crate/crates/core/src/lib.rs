//! Gaussian-process reconstruction of MIMO channel matrices from sparse,
//! noisy pilot observations.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod channel;
pub mod checks;
pub mod eval;
pub mod gpr;
pub mod kernel;
pub mod lattice;
pub mod learn;
pub mod linalg;
pub mod optim;
pub mod pilot;
