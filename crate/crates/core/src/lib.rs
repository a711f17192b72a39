pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod inference;
pub mod io;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod synthdata;
pub mod text;
pub mod train;

pub use error::{Error, Result};
