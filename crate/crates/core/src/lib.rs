pub mod app;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evalmetrics;
pub mod labelgraphs;
pub mod model;
pub mod numerics;
pub mod oracles;
pub mod pipeline;
pub mod synthetic;
pub mod textpipe;
pub mod trainer;

pub use error::{Error, Result};
