pub mod cli;
pub mod dependence;
pub mod envs;
pub mod error;
pub mod harness;
pub mod inac;
pub mod iql;
pub mod mdp;
pub mod record;
pub mod rng;
pub mod solvers;

pub use error::{Error, Result};
