pub mod error;
mod fields;
pub mod gaussian;
pub mod dynamics;
pub mod experiments;
pub mod ode;
pub mod order_params;
pub mod sim;

pub use error::{LabError, Result};
pub use order_params::{Activation, ModelConfig, OrderParams, Trajectory, VariantConfig};
