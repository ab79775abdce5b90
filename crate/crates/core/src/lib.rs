pub mod error;
pub mod experiments;
pub mod features;
pub mod io;
pub mod linalg;
pub mod model;
pub mod prior;
pub mod rng;
pub mod sampler;
