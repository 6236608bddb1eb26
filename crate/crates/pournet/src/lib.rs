//! Liquid level estimation from pouring sound and wrist force/torque.
//!
//! Pouring into a container excites an air-column resonance whose pitch rises
//! as the container fills; a wrist-mounted force/torque sensor feels the
//! source emptying at the same time. This crate turns those two streams into
//! an estimate of the remaining air column, robust to loud ambient noise, and
//! builds everything around that estimate:
//!
//! - [`dsp`]: resampling, spectrograms, zero-phase low-pass filtering, WAV I/O.
//! - [`augment`]: SNR-controlled noise mixing and clip set augmentation.
//! - [`data`]: scale interpolation, weight-to-air-column calibration,
//!   feature fusion, labeled clip containers.
//! - [`synthsim`]: a physics-based pouring simulator (geometry, resonance,
//!   wrench, scale) that generates the synthetic corpus.
//! - [`model`]: a 2-layer LSTM estimator trained from scratch with a
//!   monotonicity-regularized loss, plus exact BPTT gradients.
//! - [`control`]: closed-loop pouring with a stop policy and experiment
//!   sweeps.
//! - [`shape`]: container profile reconstruction from mass flow and the
//!   estimated liquid height.
//! - [`cli`]: the command implementations behind the `pournet` binary.
//!
//! # Quick start
//!
//! ```
//! use pournet::synthsim::{self, SuiteKind};
//!
//! // Simulate one pour and look at the resonance sweep.
//! let suite = synthsim::scenario_suite(SuiteKind::Train, 7, 1).unwrap();
//! let rec = synthsim::simulate_pour(&suite.scenarios[0]).unwrap();
//! assert_eq!(rec.audio.sample_rate, 16_000);
//! ```
//!
//! Runnable walkthroughs live in `examples/`; `cargo run --example` each of
//! them, or drive the full pipeline through the thin `pournet` binary.

pub mod augment;
pub mod cli;
pub mod control;
pub mod data;
pub mod dsp;
mod error;
mod linalg;
pub mod model;
mod poly;
mod seedmix;
pub mod shape;
pub mod synthsim;

pub use error::{Error, Result};
pub use poly::Poly;
