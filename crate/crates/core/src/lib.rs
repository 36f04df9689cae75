//! Hierarchical subgoal navigation for a reduced-order bipedal walker.
//!
//! A learned high-level policy picks a subgoal `(distance, bearing)` at the
//! start of every walking step; a linear LIP-MPC turns it into the next foot
//! placement and turning rate. The crate also carries the obstacle world,
//! the reward, an RRT-guided expert for demonstrations and a soft
//! actor-critic learner with demonstration bootstrapping.

pub mod cnn;
pub mod config;
pub mod expert;
pub mod features;
pub mod geometry;
pub mod io;
pub mod lip;
pub mod lmpc;
pub mod nn;
pub mod qp;
pub mod replay;
pub mod reward;
pub mod sac;
pub mod sim;
pub mod train;
