//! Simulated LED/light-sensor rig driven by a tabular Q-learning controller.
//!
//! The crate is organised around the control loop
//! `sense -> discretize -> select action -> actuate -> reward -> update`:
//!
//! - [`rl`]: Q-table, epsilon-greedy selection, sparse reward and the value update.
//! - [`env`]: ambient light, LED gain, ADC sensor chain, EMA smoothing, 64-bin discretization.
//! - [`harness`]: single trials, multi-target sweeps, convergence detection, persistence.
//! - [`stats`]: box-plot quartiles and fixed-width histograms.
//! - [`energy`]: open-loop and closed-loop reference controllers and power accounting.
//! - [`oracle`]: value iteration over the noise-free rig, used to check learned policies.
//! - [`fleet`]: NDJSON coordination protocol between edge units and a central brain.

pub mod energy;
pub mod env;
pub mod error;
pub mod fleet;
pub mod harness;
pub mod oracle;
pub mod rl;
pub mod seed;
pub mod stats;

pub use error::{Error, Result};
