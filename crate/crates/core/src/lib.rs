//! Neural motion planning toolkit.
//!
//! An obstacle point cloud is embedded by an encoder trained with a reconstruction
//! objective; a dropout-regularized planning network trained on RRT* demonstrations
//! then predicts waypoints. Queries are answered by bidirectional neural path
//! generation, lazy-state contraction and neural or hybrid (RRT*-backed) replanning.

pub mod geometry;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod planner;
pub mod pointcloud;
pub mod rng;
pub mod rrt;

pub use geometry::{Config, GoalRegion, Path, RigidBody, Workspace, WorkspaceKind};
pub use rng::RngStream;
