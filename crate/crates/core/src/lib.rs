//! Unlearnable examples for multi-task datasets.
//!
//! The crate bundles a small reverse-mode autodiff engine, synthetic multi-task
//! datasets, hard-parameter-sharing models, baseline unlearnable-example attacks
//! (class-wise patterns, error-minimizing and targeted adversarial noise), the
//! embedding-based perturbation generator, and the evaluation harness that ties
//! crafting, poisoning and victim training together.

pub mod attacks;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod harness;
pub mod models;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
