//! Symbol-equivariant recurrent reasoning models.
//!
//! The crate bundles a small reverse-mode tensor engine ([`tensor`]), the
//! SE-RRM and vanilla RRM architectures ([`model`]), a deep-supervision
//! trainer ([`train`]), the Sudoku / recolor task substrate ([`tasks`]) and
//! the evaluation harness ([`eval`]).

pub mod config;
pub mod error;
pub mod eval;
pub mod model;
pub mod par;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
