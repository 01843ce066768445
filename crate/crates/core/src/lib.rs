//! Closed-loop 2D driving stack on a procedural lane graph.
//!
//! The crate hosts the full loop: town and route generation, a fixed-step
//! kinematic simulator with scripted scenario actors, a privileged rule-based
//! expert, BEV rasterization with a masking/patchifying tokenizer, a
//! transformer planning head (point-estimator or DDIM diffusion, trajectory or
//! path+speed output), PID control, an imitation-learning pipeline, and an
//! infraction-based evaluation harness.

pub mod error;
pub mod geom;
pub mod rng;
pub mod tensor;

pub mod lane_graph;
pub mod route_gen;
pub mod sim;
pub mod expert;
pub mod controller;
pub mod bev;
pub mod planner;
pub mod pipeline;
pub mod evaluation;

pub use error::{Error, Result};
