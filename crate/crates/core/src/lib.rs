//! Sphere-on-surface bounce modelling.
//!
//! * [`geom`]: vectors, the restitution law, seeded random streams.
//! * [`sim`]: exact sphere-to-plane bounce simulation and point-cloud rendering.
//! * [`fit`]: hand-crafted estimators (RANSAC centres, parabola fits, sensor COR,
//!   Newtonian forward prediction).
//! * [`pim`]: the learned trajectory predictor: encoders, core engine,
//!   reconstruction net, retrieval decoder, training and grid-search inversion.
//! * [`field`]: per-cell surface parameter fields trained through the predictor.
//! * [`io`], [`metrics`], [`config`], [`manifest`]: datasets, evaluation and run
//!   bookkeeping.

pub mod config;
pub mod error;
pub mod field;
pub mod fit;
pub mod geom;
pub mod io;
pub mod manifest;
pub mod metrics;
pub mod pim;
pub mod sim;

pub use error::{Error, Result};
