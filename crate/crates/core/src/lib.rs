//! Finite element networks.

pub mod error;
pub mod autodiff;
pub mod fem;
pub mod mesh;
pub mod nn;
pub mod dynamics;
pub mod odeint;
pub mod data;
pub mod training;

pub use error::{FenError, Result};
