//! Allocation-only core of the UniCon desk-scale toolkit.
//!
//! Everything here is pure computation: a dense f32 tensor engine with a
//! reverse-mode tape that attributes every saved activation and FLOP to the
//! component that produced it, two toy pixel-space diffusion backbones, the
//! bidirectional (ControlNet-style) and unidirectional (UniCon) adapter zoo,
//! an analytic training-cost profiler, a procedural dataset with degradation
//! operators, and the PSNR/SSIM metrics. File formats, the CLI and wall-clock
//! timing live in the `unicon` companion crate.

#![no_std]
#![allow(clippy::too_many_arguments)]

extern crate alloc;

pub mod adapter;
pub mod backbone;
pub mod connector;
pub mod data;
pub mod dit;
mod error;
pub mod gradcheck;
mod kernels;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod param;
pub mod profiler;
pub mod rng;
pub mod schedule;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
pub use param::{ComponentTag, ParamId, ParamStore, Parameter};
pub use rng::Rng;
pub use tape::{Gradients, Primitive, Tape};
pub use tensor::Tensor;
