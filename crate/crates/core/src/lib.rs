//! Hierarchical-memory diffusion policy: autodiff, encoder, token memory,
//! diffusion decoder, benchmark environments and streaming trainer.
//!
//! `no_std` + `alloc`; enable the `std` feature for `std::error::Error`.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod adam;
pub mod check;
pub mod diffusion;
pub mod encoder;
pub mod envs;
pub mod error;
pub mod graph;
pub mod memory;
pub mod nn;
pub mod params;
pub mod policy;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{ParamId, Params};
pub use scalar::Scalar;
pub use tensor::Tensor;
