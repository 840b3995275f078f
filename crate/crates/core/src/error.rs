use std::io;

use thiserror::Error;

use crate::store::NodeId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A referenced node is missing from the store.
    #[error("dangling node reference {0}")]
    Dangling(NodeId),

    /// A stored node could not be decoded.
    #[error("corrupt node: {0}")]
    Corrupt(String),

    /// The caller violated an operation precondition.
    #[error("usage error: {0}")]
    Usage(String),

    /// `prove` was asked for a key the index does not hold.
    #[error("key is absent from the index")]
    Absent,

    /// A snapshot file is malformed.
    #[error("snapshot format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn corrupt(msg: impl Into<String>) -> Self {
        Error::Corrupt(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}
