//! Per-example adaptive fine-tuning of convolutional networks.
//!
//! A pre-trained convolution is split into a frozen copy and a trainable copy;
//! a recurrent gate picks, per example and per output channel, which copy
//! produces each channel, and two batch-norm layers normalize the two paths.
//!
//! The crate is `no_std` with `alloc`; the `std` feature adds
//! `std::error::Error` impls and `parallel` spreads conv kernels over rayon.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gate;
pub mod gated;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod model;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Op, Var};
pub use tensor::Tensor;
