//! Multi-agent informative path planning on probabilistic roadmaps.
//!
//! Agents share a path-length budget and build Gaussian-process beliefs over
//! two latent fields on the unit square: an interest field they try to map and
//! a risk field they should stay out of. The crate provides the ground-truth
//! generator, the GP belief, the roadmap, trajectory intents, the episode
//! engine, a set of planners, and the batch experiment harness.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bridge;
pub mod episode;
pub mod error;
pub mod experiment;
pub mod field;
pub mod geometry;
pub mod gp;
pub mod intent;
pub mod planners;
pub mod roadmap;
pub mod seed;
pub mod trace;

pub use error::{Error, Result};
pub use geometry::Point;
