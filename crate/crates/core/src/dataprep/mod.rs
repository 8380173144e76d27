//! Vocabularies and sharded binary training data.

mod shards;
mod vocab;

pub use shards::*;
pub use vocab::*;
