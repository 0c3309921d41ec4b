//! Deep relational metric learning.
//!
//! An input is described by an ensemble of `K` individual features. Each
//! sample trains only the branch whose decoder reconstructs the global
//! feature best, and a relational module passes messages between the
//! branches to produce the final relation-aware embedding. The three loss
//! terms each train their own parameter group; gradient routing is enforced
//! by stop-gradient barriers in the computation graph.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
