//! Embedding-based retrieval engine core.
//!
//! A two-tower model (query tower over character trigrams and word tokens,
//! document tower fusing text, image and contextual-feature tokens through an
//! early-fusion transformer), trained with an in-batch contrastive relevance
//! loss plus an engagement BCE on displayed-but-not-engaged impressions.
//!
//! The crate is `no_std` + `alloc`. Enable the `std` feature for runtime CPU
//! feature detection in the matrix kernels.

#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod index;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod text;
pub mod towers;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
