//! Immutable, content-addressed index structures over a shared node store:
//! Merkle Patricia Trie, Merkle Bucket Tree, Pattern-Oriented-Split Tree and
//! a Merkle B+-tree baseline, with deduplication metrics and synthetic
//! workload generation.

pub mod chunker;
mod codec;
pub mod error;
pub mod index;
pub mod mbt;
pub mod metrics;
pub mod mpt;
pub mod mvmb;
pub mod pos;
pub mod store;
pub mod workload;

pub use error::{Error, Result};
pub use index::{
    verify, Conflict, DiffResult, Entry, MergeOutcome, MergeStrategy, Meta, OpStats, Proof,
    RootHandle, StructureKind,
};
pub use mbt::MbtMeta;
pub use mvmb::MvmbMeta;
pub use pos::PosConfig;
pub use store::{NodeId, Store, StoreStats};
