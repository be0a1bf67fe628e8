//! Tri-modal (video, audio, transcript) intent recognition over
//! pre-extracted encoder features.
//!
//! The crate covers the whole post-encoder pipeline: a small reverse-mode
//! autodiff engine ([`numerics`]), the 23-class label space and dataset
//! manifests ([`data`]), keyword collection and majority-vote annotation
//! ([`curation`]), three-way contrastive pretraining ([`contrastive`]),
//! supervised fusion classifiers ([`fusion`]) and the cross-validation
//! harness ([`evaluation`]).

pub mod checkpoint;
pub mod contrastive;
pub mod curation;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod gradcheck;
pub mod numerics;
pub mod rng;
pub mod synthetic;

pub use error::{Error, ErrorCategory, Result};

// Every book chapter is compiled as a doc-test so its snippets stay in step
// with the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/curation.md")]
    mod curation {}
    #[doc = include_str!("../../../book/src/contrastive.md")]
    mod contrastive {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
