//! Path-following NMPC for simultaneous force and motion control of a 3-DOF
//! arm on a compliant surface.
//!
//! The contact force is predicted by a spring law plus a Gaussian process on
//! the residual. The GP variance can tighten the force bounds of the optimal
//! control problem. Modules, bottom up:
//!
//! - [`dynamics`]: kinematics, rigid-body dynamics, RK4
//! - [`gp`]: squared-exponential GP regression and hyperparameter training
//! - [`contact`]: Hook, Hertz and hybrid force models and their identification
//! - [`pathref`]: reference paths and the virtual timing system
//! - [`ocp`]: transcription, SQP and QP solvers, the receding-horizon controller
//! - [`simloop`]: scenarios, ground truth, closed-loop runs, logs and metrics
//! - [`par`]: sequential/rayon execution switch

pub mod contact;
pub mod dynamics;
pub mod error;
pub mod gp;
pub mod ocp;
pub mod par;
pub mod pathref;
pub mod simloop;

pub use error::{Error, Result};
