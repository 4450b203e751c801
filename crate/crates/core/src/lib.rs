//! Core of the interactive head generation stack.
//!
//! Everything in this crate is pure computation over `alloc` collections:
//! the tensor type and reverse-mode tape, the long-range contextual
//! understanding pipeline (`lcu`), the region-decoupled cross-attention block
//! (`sdcm`), the latent velocity-field generator, two-stage flow-matching
//! training, the motion-space metrics and the synthetic dyadic-conversation
//! generator used as a verification oracle. File formats, configuration
//! parsing and the command line live in the `echo` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod datamodel;
pub mod error;
pub mod generator;
pub mod heldout;
pub mod gradcheck;
pub mod lcu;
pub mod math;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod scan;
pub mod sdcm;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{NdArray, Tensor};
