//! Human-conditioned indoor layout synthesis.
//!
//! Rooms are populated with abstract humans (contact boxes and free-space
//! footprints), an autoregressive set model learns to place furniture
//! conditioned on them, and a refinement stage nudges placements against the
//! human geometry.

pub mod diffcore;
pub mod formats;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod refine;
pub mod scenegen;
