//! Agentic-Q estimation and step-wise critic-free policy optimization for
//! GUI agents, exercised on a deterministic synthetic website MDP.

pub mod agentic_q;
pub mod harness;
pub mod policy;
pub mod protocol;
pub mod rng;
pub mod swpo;
pub mod synthweb;
pub mod tensor;
pub mod trajectories;
