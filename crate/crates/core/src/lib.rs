//! Generative visual attribution on synthetic chest phantoms.

pub mod attribution;
pub mod codec;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod run;
pub mod tensor;
pub mod text;

pub use error::{Result, VadeError};
