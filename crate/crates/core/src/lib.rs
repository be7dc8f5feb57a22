//! Robust model predictive control for a surface vessel in a water-flow field,
//! with discrete-time control barrier functions for obstacle and border
//! avoidance.

pub mod ad;
pub mod dynamics;
pub mod error;
pub mod flow;
pub mod io;
pub mod nlp;
pub mod ocp;
pub mod planner;
pub mod safety;
pub mod scenario;

pub use error::{Error, Result};
