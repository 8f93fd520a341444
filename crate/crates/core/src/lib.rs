//! Recurrent event detection for sleep EEG.
//!
//! The numeric core is generic over [`Real`]; the aliases below fix the
//! scalar type for the common cases.

// `!(x > 0.0)` is used on purpose so NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cwt;
pub mod detector;
pub mod error;
pub mod evalkit;
pub mod postproc;
pub mod redmodel;
pub mod scalar;
pub mod sigio;
pub mod splitkit;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Signal64 = sigio::Signal<f64>;
pub type Signal32 = sigio::Signal<f32>;
pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tensor32 = autodiff::Tensor<f32>;
pub type ParamStore64 = autodiff::ParamStore<f64>;
pub type Network64 = redmodel::Network<f64>;
pub type Network32 = redmodel::Network<f32>;
