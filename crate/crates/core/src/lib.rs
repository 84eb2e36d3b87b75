//! Learning a control policy from a single video demonstration.
//!
//! The agent acts in the hopper's state/action space while the target
//! behaviour is given only as frames. A similarity predictor, trained from
//! 1–5 ratings of aligned clip pairs, scores (demo frame, agent observation)
//! pairs and its expected rating is the reward optimised by TRPO.

pub mod env;
pub mod error;
pub mod feedback;
pub mod nn;
pub mod orchestrator;
pub mod render;
pub mod seed;
pub mod simpred;
pub mod trpo;
pub mod workflows;

pub use error::{Error, Result};
