pub mod autodiff;
pub mod error;
pub mod model;
pub mod repr;
pub mod ssm;
pub mod trainer;

pub use error::{Error, Result};
