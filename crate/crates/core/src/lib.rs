pub mod container;
pub mod error;
pub mod grid;
pub mod matcher;
pub mod par;
pub mod patcher;

pub use error::{Error, Result};
pub mod featurizer;
pub mod pyramid;
pub mod propagator;
pub mod evalkit;
pub mod verify;
