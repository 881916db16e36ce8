//! Change-driven autonomous exploration in a simulated 2D play kitchen.

pub mod achiever;
pub mod autodiff;
pub mod awrpolicy;
pub mod changemetric;
pub mod config;
pub mod ensemble;
pub mod error;
pub mod explorer;
pub mod harness;
pub mod planner;
pub mod seeds;
pub mod simworld;
pub mod worldmodel;

pub use error::{Error, Result};
