//! Vision guidance for an aerial manipulator.
//!
//! The crate covers the kinematic model of a multirotor carrying a 4-link
//! arm with an eye-in-hand camera, a decoupled pose-based servo policy
//! (arm joints correct rotation, the vehicle corrects translation), the
//! geometric core of a keypoint-based 6-DoF pose tracker, toy-scale forward
//! passes of its attention blocks and training losses, and a deterministic
//! simulator closing the loop.

pub mod error;
pub mod geometry;
pub mod kinematics;
pub mod matching;
pub mod neural;
pub mod posesolve;
pub mod servo;
pub mod sim;
pub mod verify;

pub use error::{Error, Result};
