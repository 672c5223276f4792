//! Layer-width search under FLOPs budgets with weight-sharing supernets.

pub mod assign;
pub mod bench;
pub mod error;
pub mod eval;
pub mod evo;
pub mod net;
pub mod pipeline;
pub mod prior;
pub mod rng;
pub mod space;
pub mod supertrain;

pub use error::{Error, Result};
