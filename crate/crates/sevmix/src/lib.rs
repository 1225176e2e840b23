pub mod baselines;
pub mod diagnostics;
pub mod dist;
pub mod error;
pub mod gem;
pub mod infer;
pub mod model;
pub mod numeric;
pub mod penalty;
pub mod rng;
pub mod schema;
pub mod select;
pub mod sim;
