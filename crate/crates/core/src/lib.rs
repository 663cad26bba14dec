//! Residual quantization with implicit neural codebooks.
//!
//! Each residual step selects a codeword from a codebook that is generated by
//! a small network conditioned on the partial reconstruction of the vector.
//! The crate contains the whole numeric stack: k-means and greedy RQ used for
//! initialization, the codebook network with hand-written gradients, training,
//! encoding/decoding (including prefix decoding and product splits), and the
//! search pipeline built from an IVF partition, an explicit additive decoder
//! for lookup-table distances, and shortlist re-ranking.
//!
//! The crate is `no_std` + `alloc` when built without the default `std`
//! feature. File formats, timing and the command line live in the `qinco`
//! crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod clustering;
pub mod codec;
pub mod data;
mod error;
pub mod linalg;
pub mod metrics;
pub mod model;
mod par;
pub mod search;
pub mod training;

pub use clustering::{kmeans, rq_decode, rq_encode, rq_train, KmeansResult, RqModel};
pub use codec::{CodeArray, PqQincoModel};
pub use error::{Error, Result};
pub use linalg::{Matrix, Real, Ridge, Rng};
pub use model::{QincoConfig, QincoModel, Variant};
pub use search::{AqDecoder, IvfIndex, SearchParams};
pub use training::{LossMode, TrainConfig, TrainReport};
