pub mod coding;
mod gf256;
pub mod placement;
pub mod rng;
pub mod sim;
pub mod manager;
pub mod monitor;
pub mod system;
pub mod workload;
pub mod analysis;
