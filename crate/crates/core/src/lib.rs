pub mod agents;
pub mod cli;
pub mod datasets;
pub mod diffnet;
pub mod divergences;
pub mod envs;
pub mod error;
pub mod eval;

pub use error::{Error, Result};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;
