#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod binio;
pub mod config;
pub mod contrastive;
pub mod costsim;
pub mod data;
pub mod error;
pub mod multiplexer;
pub mod pipeline;
pub mod router;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
