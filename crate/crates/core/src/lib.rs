// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal sufficient rationales for autoregressive sequence models.
//!
//! A rationale for the prediction of `y_t` is a subset `S` of the context
//! positions `1..t` such that the model, shown only `y_S`, still predicts
//! `y_t`. [`rationalizer::greedy_rationalize`] grows `S` one token at a time,
//! always adding the token that most raises `p(y_t | y_S)`;
//! [`rationalizer::exhaustive_rationalize`] finds a smallest such set by
//! enumeration. The model in [`model`] evaluates any position-tagged subset
//! directly, and [`training`] fits it with word dropout so that those subset
//! predictions are meaningful.

pub mod baselines;
pub mod compat;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rationalizer;
pub mod real;
pub mod training;
mod util;

pub use error::{Error, Result};
pub use util::{argmax, atomic_write, rank_of};
