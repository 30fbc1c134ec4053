//! Multi-modal entity set expansion on a single machine.
//!
//! Given a handful of seed entities, [`expansion`] ranks the remaining
//! entities of a [`corpus::Corpus`] by how well their masked-entity
//! distributions match the seeds. The distributions come from a small
//! multi-modal transformer ([`encoder`]) trained by [`trainer`].

pub mod autodiff;
pub mod cli;
pub mod corpus;
pub mod dataset_tools;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod expansion;
pub mod objectives;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
