//! Hybrid mechanistic/neural glucose-insulin modelling.
//!
//! The crate couples the Bergman minimal model with per-meal glucose
//! absorption functions (square, bump, or a small neural network) and fits
//! the absorption parameters end to end by differentiating through the
//! unrolled Euler integration. It also contains the virtual-patient simulator
//! used to produce training data and the windowed forecast evaluation.
//!
//! The crate is `no_std` and needs only `alloc`; file formats, configuration
//! parsing and the command-line driver live in the companion `glucose-cli`
//! crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod absorption;
mod error;
pub mod evaluation;
mod math;
pub mod nn;
pub mod ode;
pub mod rng;
pub mod simulator;
pub mod training;

pub use error::{Error, Result};
