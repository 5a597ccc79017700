//! tabrl: a tabular reinforcement-learning laboratory.
//!
//! The crate bundles exact planning on tabular MDPs with the sampled
//! learners built on top of it (generative-model planning and Q-learning,
//! optimistic online exploration, pessimistic offline value iteration,
//! distributionally robust value iteration, exact-gradient policy
//! optimization, and tabular preference optimization), together with a
//! seeded experiment harness that makes every run reproducible bit for bit.

pub mod envs;
pub mod error;
pub mod genmodel;
pub mod harness;
pub mod mdp;
pub mod offline;
pub mod online;
pub mod policyopt;
pub mod rlhf;
pub mod robust;

mod linalg;

pub use error::{Error, Result};
