//! Encoder-decoder sequence models whose every linear map is a shared
//! matrix modulated by per-language rank-k factors.
//!
//! The math is generic over [`Scalar`] (`f32` or `f64`); the aliases below fix
//! it to `f64`, which is what training and all verification tolerances use.

pub mod blocks;
pub mod diffcore;
pub mod doubledouble;
pub mod error;
pub mod factorlin;
pub mod harness;
pub mod rng;
pub mod scalar;
pub mod seq2seq;
pub mod verify;

pub use doubledouble::DoubleDouble;
pub use error::{Error, Result};
pub use rng::SeedTree;
pub use scalar::Scalar;

pub type Tensor = diffcore::Tensor<f64>;
pub type ParamStore = diffcore::ParamStore<f64>;
pub type Tape<'p> = diffcore::Tape<'p, f64>;
