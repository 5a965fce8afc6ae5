//! Simulation primitives for communication-efficient personalized federated
//! edge learning (FEEL) of massive-MIMO CSI-feedback autoencoders.
//!
//! The crate is `no_std` + `alloc`. Everything here is pure computation over
//! explicit RNG handles; file formats, configuration and the command line
//! live in the `feel-sim` companion crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autoencoder;
pub mod channel;
pub mod error;
pub mod feel;
pub mod nn;
pub mod personalize;
pub mod quant;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
