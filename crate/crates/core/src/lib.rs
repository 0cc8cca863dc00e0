//! Trace-driven simulation of smart-home user-activity inference and of
//! stochastic traffic padding (STP), a defense that pads traffic identically
//! during real user activity and during randomly injected decoy periods.
//!
//! The pipeline is: [`generator`] synthesizes device traces from recorded
//! activity segments, [`shaping`] applies STP or a baseline defense,
//! [`adversary`] runs the rate-threshold attack and scores it, and [`metrics`]
//! compares the measured confidence/overhead tradeoff with its closed form.

pub mod adversary;
pub mod decision;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod profiles;
pub mod seed;
pub mod shaping;
pub mod trace;

pub use error::{Error, Result};
pub use trace::{ActivityLabel, Direction, Trace, TraceEvent, SECOND};
