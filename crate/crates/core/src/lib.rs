//! Active identification of a suspended mass's string length and open-loop
//! planning of a swing task with the identified value.

pub mod error;
pub mod estimator;
pub mod harness;
pub mod integrate;
pub mod model;
pub mod sac;
pub mod sensitivity;
pub mod trajopt;

pub use error::{Error, Result};
