//! Object-goal navigation engine on a voxel grid world.
//!
//! Perception feeds an object-centric scene graph; a planner chooses between
//! frontier exploration and travelling to a promising object; a short-term
//! memory verifies target sightings; a fast-marching layer turns goals into
//! move primitives.

pub mod apiserve;
pub mod caption;
pub mod geom;
pub mod harness;
pub mod llmgw;
pub mod navexec;
pub mod perception;
pub mod planner;
pub mod pruner;
pub mod scenegraph;
pub mod stm;
pub mod world;
