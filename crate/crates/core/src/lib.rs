pub mod checkpoint;
pub mod error;
pub mod evalkit;
pub mod io;
pub mod kv;
pub mod model;
pub mod numerics;
pub mod seeds;
pub mod textdata;
pub mod training;

pub use error::{Error, Result};
