//! Rough path lifts and Malliavin diagnostics for processes in a finite
//! Wiener chaos.
//!
//! The crate is layered bottom-up: [`symtensor`] holds the tensor algebra,
//! [`chaos`] evaluates multiple Wiener–Itô integrals, [`kernels`] builds the
//! kernel paths `t ↦ f_t`, [`roughlift`] and [`enhanced`] construct level-2
//! lifts, [`rde`] solves rough differential equations with their Jacobian and
//! Malliavin derivatives, and [`analysis`] hosts the greedy-partition, tail,
//! rate-function and scaling diagnostics.

#![allow(clippy::needless_range_loop)]

pub mod analysis;
pub mod chaos;
pub mod enhanced;
pub mod error;
pub mod kernels;
pub mod mc;
pub mod rde;
pub mod roughlift;
pub mod symtensor;

pub use error::{Error, Result};
pub use symtensor::SymTensor;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
