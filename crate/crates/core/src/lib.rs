//! Tensor-tiling parallelism planner: finds per-tensor tilings that minimize
//! communication across `2^k` devices, rewrites the serial graph into a
//! per-device execution plan, and simulates its traffic and numerics.

pub mod cli;
pub mod cost;
pub mod dense;
pub mod error;
pub mod exec;
pub mod graph;
pub mod kcuts;
pub mod onecut;
pub mod oracle;
pub mod placement;
pub mod sim;
pub mod tiling;

pub use error::{Error, Result};
