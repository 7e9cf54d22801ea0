//! Multi-view image classification with all-subset view fusion,
//! uncertainty-weighted score fusion and hierarchical mutual distillation.
//!
//! The guide in `book/` walks through each module; its code blocks run as
//! doc-tests of this crate.

pub mod cli;
pub mod combinator;
pub mod data;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod gradsuite;
pub mod rng;
pub mod tensor;
pub mod trainkit;
pub mod uncertainty;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tape.md")]
    mod tape {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/objective.md")]
    mod objective {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
