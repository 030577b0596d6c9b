//! Discrete-time simulator of a competitive EV fast-charging market.
//!
//! EVs entering a highway pick a charging station by playing a selection
//! game that settles into a partition nobody wants to leave; stations set
//! prices with fixed tariffs, undercutting dynamics, or learned policies
//! trained by Q-learning over a small neural value approximator. The
//! `scenario` module packages the standard market layouts, the training
//! loop, and report export; the `cli` companion crate exposes them as a
//! command-line tool.

pub mod choice;
pub mod cssg;
pub mod error;
pub mod market;
pub mod nn;
pub mod pricing;
pub mod scenario;

pub use error::{Result, SimError};
