//! Transformer autoregressive flows with exact likelihood.
//!
//! The crate is `no_std` + `alloc` when built without the default `std`
//! feature. Everything here is pure computation: a small reverse-mode
//! autodiff engine over dense `f64` tensors, the causal Transformer
//! conditioner, affine autoregressive flow blocks stacked in the deep-shallow
//! layout, Gaussian classifier-free guidance, the noisy-latent autoencoder
//! pipeline and Metropolis-Hastings inpainting. File formats, configuration
//! files and the command line live in the companion `afflow` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod arch;
pub mod autodiff;
pub mod backbone;
pub mod data;
mod error;
pub mod flow;
pub mod gradcheck;
pub mod guidance;
pub mod inpaint;
pub mod kernels;
pub mod latent;
pub mod math;
pub mod optim;
pub mod params;
pub mod rng;
pub mod rope;
pub mod tensor;
pub mod train;

pub use autodiff::{Backend, Eval, Graph, Var};
pub use error::{Error, Result};
pub use flow::{FlowConfig, FlowModel};
pub use tensor::Tensor;
