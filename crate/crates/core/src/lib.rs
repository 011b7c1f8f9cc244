//! Table union search over data lakes.
//!
//! Tables are rendered as token-bounded text samples, embedded into unit
//! vectors, stored in an HNSW-backed vector store and retrieved by
//! similarity. The [`bench`] module wraps the pipeline in a resumable step
//! runner and scores predictions with MAP@k / AR@k, and [`synth`] produces
//! data lakes with known ground truth to run it against.

pub mod bench;
pub mod embed;
pub mod error;
pub mod exec;
pub mod hash;
pub mod index;
pub mod search;
pub mod serialize;
pub mod synth;
pub mod table;

pub use error::{Error, Result};
pub use exec::Exec;
pub use table::{DataLake, Table, TableRef};
