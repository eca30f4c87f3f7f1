//! Attention-guided multi-scale gel-object detector: tensors with reverse-mode
//! autodiff, network layers, the two-stage detector, metrics and a synthetic
//! data generator. Everything here is `no_std` + `alloc`; IO lives in the
//! `smrnet` crate.

#![no_std]

extern crate alloc;

pub mod attention;
pub mod backbone;
pub mod detector;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod ops;
pub mod synthgel;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use layers::{Graph, Mode, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};
