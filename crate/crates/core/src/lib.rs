//! Compression of knowledge-graph star neighborhoods into soft vectors that
//! are spliced into the input-embedding sequence of a frozen decoder-only
//! language model, with the training, baseline and evaluation machinery
//! around it.

pub mod codec;
pub mod conceptformer;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod graph_store;
pub mod lookup_store;
pub mod optim;
pub mod pipeline;
pub mod prompting;
pub mod tensor;
pub mod training;
pub mod toy_lm;

pub use error::{Error, Result};
