//! Join-the-shortest-of-d-queues load balancing: occupancy dynamics,
//! stochastic simulation, the fluid limit and large/moderate deviation tools.

pub mod cli;
pub mod error;
pub mod fluid;
pub mod mdp;
pub mod occupancy;
pub mod path;
pub mod rate;
pub mod report;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};
pub use occupancy::{FiniteQVector, ModelParams, MuVector, QVector};
pub use path::{Control, PLPath};
