pub mod autodiff;
pub mod diffnet;
pub mod distributions;
pub mod error;
pub mod experiment;
pub mod fields;
pub mod io;
pub mod sde;
pub mod linalg;
pub mod objectives;
pub mod training;
pub mod mc;
pub mod metrics;

pub use error::{Error, Result};
