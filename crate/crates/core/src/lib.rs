//! Source-free domain adaptation with uncertainty-weighted pseudo-label fusion.
//!
//! A student classifier is adapted to an unlabeled target domain using soft
//! labels fused from two teachers: a classifier teacher sampled with Monte
//! Carlo dropout (and tracked as an exponential moving average of the
//! student), and a black-box label provider sampled several times per input.
//! Each teacher's mean prediction is weighted by `exp(-MI)`, where `MI` is the
//! mutual information across its samples.

pub mod adapt;
pub mod dataio;
pub mod error;
pub mod evalkit;
pub mod fusion;
pub mod numkit;
pub mod teachers;
pub mod uncertainty;

pub use error::{Error, Result};
