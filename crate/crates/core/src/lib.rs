//! Dialogue-aware two-stage text-to-video retrieval.
//!
//! Stage I embeds the first query and every video independently and retrieves
//! the exact cosine Top-K from a precomputed index. Stage II fuses the first
//! and latest query turns and re-scores only those candidates with a small
//! cross-encoder. Everything is trained from scratch on top of the
//! [`autodiff`] tape.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod retrieval;
pub mod training;

pub use error::{Error, Result};

/// The book's chapters, compiled here so that their examples run as doctests.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    pub mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/retrieval.md")]
    pub mod retrieval {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
    #[doc = include_str!("../../../book/src/service.md")]
    pub mod service {}
    #[doc = include_str!("../../../book/src/acceptance.md")]
    pub mod acceptance {}
}
