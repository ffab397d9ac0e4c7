//! Ego-centric joint scene-mode prediction with causality-aware policy
//! alignment, trained and evaluated on procedurally generated 2D driving
//! scenes.
//!
//! The crate is organised bottom-up: [`numerics`] provides tensors and
//! reverse-mode differentiation, [`geometry`] the planar primitives, [`scene`]
//! the data model and generator, [`model`] the network, [`assignment`] and
//! [`losses`] the supervised objectives, [`reward`] and [`grpo`] the policy
//! alignment, [`trainer`] the staged optimisation, [`simulator`] the
//! closed-loop evaluation and [`ablation`] the component grid.

pub mod error;
pub mod numerics;
pub mod geometry;
pub mod scene;
pub mod model;
pub mod assignment;
pub mod losses;
pub mod reward;
pub mod grpo;
pub mod trainer;
pub mod simulator;
pub mod ablation;
pub mod seed;
pub mod verify;

pub use error::{Error, Result};
pub use geometry::{DrivablePolygon, Footprint, Point2, Polyline, Pose2};
pub use scene::{AgentState, Scene, ScenarioTag};
