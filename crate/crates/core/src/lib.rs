//! Symbolic-token workflow compilation and execution for simulated MRI
//! tool chains.

pub mod bench;
pub mod compiler;
pub mod contract;
pub mod controllers;
pub mod digest;
pub mod executor;
pub mod reflector;
pub mod registry;
pub mod sim_tools;
pub mod sketch;
pub mod store;
pub mod token;
pub mod trace;
pub mod value;
