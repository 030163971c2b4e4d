//! Physics-informed behavior cloning for floating-base legged systems.

pub mod autodiff;
pub mod biped;
pub mod correction;
pub mod error;
pub mod features;
pub mod kinematics;
pub mod losses;
pub mod mann;
pub mod optim;
pub mod rollout;
pub mod so3;
pub mod synth;
pub mod train;
pub mod trajectory;

pub use error::{Error, Result};
