//! Crowd navigation with a bilevel model predictive controller.
//!
//! The robot plan is optimized jointly with human predictions that are
//! refined by embedded ORCA collision-avoidance problems and fused from
//! weighted prediction samples. The crate also ships a corridor simulator
//! with randomized ORCA humans and an experiment harness ([`cli`]).

pub mod ad;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod mpc;
pub mod nlp;
pub mod orca;
pub mod prediction;
pub mod qp;
pub mod refine;
pub mod sim;
pub mod state;

pub use error::{Error, Result};
pub use geometry::{Segment, Vec2};
