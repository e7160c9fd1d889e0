//! Chance-constrained trajectory optimization with certified collision-risk
//! bounds.
//!
//! Uncertain obstacles are nominal convex shapes translated by a Gaussian
//! offset. The [`risk`] module certifies an upper bound on the probability
//! that a posed robot touches such an obstacle by growing ellipsoidal
//! ε-shadows until they contact the robot, and differentiates that bound with
//! respect to the joint configuration. The [`planner`] module uses those
//! bounds as constraints in a penalty / trust-region sequential convex
//! optimizer that also allocates the joint risk budget across timesteps.
//! [`validate`] provides Monte Carlo ground truth and two baseline planners.

pub mod cli;
pub mod error;
pub mod geometry;
pub mod kinematics;
pub mod planner;
pub mod qp;
pub mod risk;
pub mod stats;
pub mod validate;

pub use error::{Error, Result};
