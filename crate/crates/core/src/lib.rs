//! Time-optimal quadrotor trajectories through fixed waypoints, found by
//! multi-fidelity Bayesian optimization of the segment time allocation.

pub mod acquisition;
pub mod cli;
pub mod flatness;
pub mod optimizer;
pub mod simdyn;
pub mod stats;
pub mod surrogate;
pub mod trajectory;
