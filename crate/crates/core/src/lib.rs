pub mod align;
pub mod codec;
pub mod config;
pub mod error;
pub mod eval;
pub mod io;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
pub use linalg::Matrix;
