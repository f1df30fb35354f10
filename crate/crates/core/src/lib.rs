//! Tabular task-phasing curriculum learning from demonstrations.
//!
//! The crate provides exact and entropy-regularized solvers for finite MDPs,
//! the task continuum between a demonstration-derived start task and a
//! sparse target task, temporal and reward phasing, a KL-budgeted policy
//! improver with a phasing driver, built-in environments, and an exact
//! harness for the monotonicity and convergence properties of the method.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod demos;
pub mod divergence;
pub mod envs;
pub mod error;
pub mod mdp;
pub mod reward_phasing;
pub mod rl_eps;
pub mod sampling;
pub mod solve;
pub mod task;
pub mod temporal;
pub mod theory;

pub use error::{Error, Result};
pub use mdp::{Controller, RewardTable, Step, StochasticPolicy, TabularMdp, Trajectory, ValueTable};
