pub mod bandit;
pub mod compare;
pub mod config;
pub mod data;
pub mod error;
pub mod fedsim;
pub mod lora;
pub mod model;
pub mod numkit;
pub mod pruning;
pub mod selftest;

pub use error::{Error, Result};
