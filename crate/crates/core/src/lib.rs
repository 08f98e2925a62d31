//! Desk-scale cross-domain few-shot learning with self-reorienting adversarial
//! style perturbation.
//!
//! The crate is layered bottom-up: [`tensor`] is a small reverse-mode
//! autodiff engine, [`backbone`] and [`style`] build the four-block feature
//! extractor and its feature-statistics hooks, [`mining`], [`reorient`],
//! [`perturb`] and [`objectives`] implement the training-time machinery, and
//! [`harness`] composes them into meta-trainers, evaluation and probes over
//! the synthetic domains of [`data`].

pub mod backbone;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod io;
pub mod mining;
pub mod objectives;
pub mod perturb;
pub mod reorient;
pub mod rng;
pub mod style;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{forward_primitive, Gradients, Primitive, Tape, Tensor};
