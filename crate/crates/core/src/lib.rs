//! Persistent monitoring of a 1-D mission space by a single agent.
//!
//! The crate covers the whole pipeline: an exact event-driven simulator of
//! the agent / uncertainty hybrid system ([`sim`]), exact perturbation
//! gradients of the mean uncertainty with respect to the switching
//! locations ([`ipa`]), projected gradient descent over switching schedules
//! ([`optimizer`]), an online receding-horizon controller ([`horizon`]) and
//! configuration / export plumbing ([`io`]).

// range checks are written to reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod horizon;
pub mod io;
pub mod ipa;
pub mod model;
pub mod optimizer;
pub mod par;
pub mod sim;

pub use model::{MissionConfig, SamplePoint, SwitchingSchedule};
pub use par::Execution;
pub use sim::{simulate, Trajectory};
