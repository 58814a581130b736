#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod detectors;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod rectify;
pub mod repr;
pub mod rng;
pub mod sweep;
pub mod toydiff;
