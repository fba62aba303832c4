//! Neural Turing Machines with hierarchically connected memory blocks.
//!
//! The crate covers the baseline NTM and three structured-memory variants:
//! a hidden memory smoothed from the controlled one ([`Variant::Ntm1`]), two
//! controlled blocks mixed top-down ([`Variant::Ntm2`]), and one block per
//! controller layer ([`Variant::Ntm3`]). Everything is differentiated by a
//! small define-by-run tape in [`tensor`] and trained with RMSProp on the
//! copy and associative-recall tasks.

pub mod addressing;
pub mod config;
pub mod controller;
pub mod error;
pub mod gradcheck;
pub mod memory_graph;
pub mod params;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use memory_graph::{ModelConfig, NtmModel, Variant};
pub use tensor::{Tape, Tensor, Var};
