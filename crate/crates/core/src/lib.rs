//! Multi-spike leaky integrate-and-fire networks with closed-form spike
//! times and exact timing gradients.

pub mod backward;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod error;
pub mod forward;
pub mod loss;
pub mod mnist;
pub mod neuron;
pub mod optim;
pub mod oracle;
pub mod train;

pub use error::{Error, Result};
