//! Scene-wise procedural text understanding.
//!
//! A paragraph is read sentence by sentence while a scene graph over its
//! entities, location candidates and knowledge concepts evolves. Each step
//! summarises the current scene with relation-aware graph attention, encodes
//! the next sentence with a small transformer, and predicts which entities
//! exist and where they are. Entity state changes and locations are then
//! read off by diffing adjacent scenes.

pub mod context_encoder;
pub mod corpus;
pub mod error;
pub mod evaluator;
pub mod model;
pub mod numerics;
pub mod predictor;
pub mod scene_graph;
pub mod state_reasoner;
pub mod structure_encoder;
pub mod synthetic;
pub mod trainer;

pub use error::{Result, SgrError};
