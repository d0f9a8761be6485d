pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod network;
pub mod reference;
pub mod seed;
pub mod selfcheck;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
