//! DNF-Net: soft disjunctive-normal-form networks for tabular data.
//!
//! The numeric stack is generic over the scalar type through
//! [`scalar::Scalar`] (`f32` or `f64`); the concrete aliases below pin the
//! default 64-bit instantiation used by the CLI and the training protocol.

pub mod autodiff;
pub mod data;
pub mod dnnf;
pub mod error;
pub mod feature_selection;
pub mod localization;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod train;
pub mod vc;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default scalar for end-to-end training; gradient checks demand 64-bit.
pub type Real = f64;

pub type TapeF64 = autodiff::Tape<f64>;
pub type TapeF32 = autodiff::Tape<f32>;
pub type DnfNetF64 = model::DnfNet<f64>;
pub type FcnF64 = model::Fcn<f64>;
pub type MaskedFcnF64 = model::MaskedFcn<f64>;
