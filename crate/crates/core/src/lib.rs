//! LocalTrans: multiscale local-transformer homography estimation.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] dense storage, the differentiable ops the network needs and
//!   a reverse-mode tape.
//! * [`lak`] the local attention kernel (logits, scaled softmax, local
//!   attention convolution) with analytic backward passes and a global
//!   attention reference.
//! * [`homography`] 4-point DLT, composition, warping, metrics, image I/O
//!   and neighbour-averaged grid stitching.
//! * [`network`] the siamese encoder, self/cross attention modules,
//!   regression heads, the coarse-to-fine cascade and its trainer.
//! * [`data`] synthetic pair generation and dataset persistence.
//! * [`bench`] cost accounting for local versus global attention.

pub mod alloc;
pub mod bench;
pub mod data;
pub mod error;
pub mod homography;
pub mod lak;
pub mod network;
pub mod parallel;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
