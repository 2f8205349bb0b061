//! Numerical KAM toolkit: invariant tori of degenerate dissipative systems
//! via homological solves and coordinate-transform composition, plus
//! executable checks of the supporting quantitative lemmas.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod error;
pub mod grid;
pub mod homological;
pub mod kamdriver;
pub mod lattice;
pub mod model;
pub mod resonance;
pub mod schedule;
pub mod smoothing;
pub mod stats;
pub mod trigpoly;

pub use error::{KamError, Result};
pub use trigpoly::{StripNorm, TrigPoly};
