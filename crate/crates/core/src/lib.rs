pub mod cli;
pub mod corridor;
pub mod derivatives;
pub mod ellipsoid;
pub mod error;
pub mod linalg;
pub mod nlp;
pub mod ocp;
pub mod selftest;
pub mod testproblems;
pub mod tube;

pub use error::{Error, Result};
