//! Strictly causal online video stabilization.
//!
//! The crate implements a three-stage pipeline — motion estimation over
//! sparse keypoints and dense backward flow, motion propagation onto a
//! regular vertex grid via blended cluster homographies with a directly
//! optimized residual, and motion compensation through a causal 3-tap
//! kernel smoother plus backward frame warping — together with a bounded
//! queue multi-threaded executor, evaluation metrics, and synthetic
//! ground-truth generators.

pub mod config;
pub mod flo;
pub mod frame;
pub mod geometry;
pub mod metrics;
pub mod observer;
pub mod pipeline;
pub mod propagation;
pub mod renderer;
pub mod smoother;
pub mod synth;

pub use config::RunConfig;
pub use frame::Frame;
pub use geometry::{Homography, Point2};
