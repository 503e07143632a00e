//! Trajectory planning as masked discrete diffusion over waypoint tokens,
//! with token-space self-editing, structure-aware perturbations, a
//! drivable-area field loss, group-relative policy optimization and a
//! cached inference runtime.

pub mod bench;
pub mod codec;
pub mod error;
pub mod eval;
pub mod field;
pub mod geometry;
pub mod hash;
pub mod model;
pub mod perturb;
pub mod planner;
pub mod reward;
pub mod rl;
pub mod rng;
pub mod runtime;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
