pub mod cli;
pub mod data;
pub mod error;
pub mod fmt;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod par;
pub mod training;

pub use error::{Error, Result};
