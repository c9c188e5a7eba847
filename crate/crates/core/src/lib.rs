//! Audio-conditioned facial motion generation with a multi-stream
//! diffusion transformer trained by rectified flow.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alse;
pub mod autodiff;
mod binio;
pub mod checkpoint;
pub mod conditioning;
pub mod config;
pub mod data_synth;
pub mod dit;
pub mod error;
pub mod flow;
pub mod motion_space;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod rng;
pub mod runtime;

pub use error::{Error, Result};
