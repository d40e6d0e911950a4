pub mod error;
pub mod experiments;
pub mod g0_fit;
pub mod gaussian_approx;
pub mod poisson_cv;
pub mod samplers;
pub mod special_fns;
pub mod targets;

pub use error::{Error, Result};
