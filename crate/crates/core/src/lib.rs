//! Privileged knowledge distillation through entropic optimal transport
//! between teacher and student batch similarity structures.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod datagen;
pub mod diffcore;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod models;
pub mod otsolver;
pub mod rng;
pub mod simgraph;
pub mod trainer;

pub use error::{Error, Result};
