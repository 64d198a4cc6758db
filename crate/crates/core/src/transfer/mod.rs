//! KVCache movement between prefill and decode instances.

pub mod codec;
pub mod link;

pub use codec::{
    gather, layer_slice, layout_buffer, pack, pack_flat, pack_into, recv_scatter, BlockId, BlockPool, BlockTable,
    ContiguousLayout, Segment,
};
pub use link::{
    layered_completion, request_xi, transfer_time, utilization, LinkModel, TransferMode, TransferSample,
    XiSample,
};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TransferError {
    #[error("layout segments must have nonzero length")]
    EmptySegment,
    #[error("byte size overflow")]
    Overflow,
    #[error("expected {expected} layers, got {actual}")]
    LayerCountMismatch { expected: usize, actual: usize },
    #[error("expected {expected} bytes, got {actual}")]
    LengthMismatch { expected: u64, actual: u64 },
    #[error("block size must be nonzero")]
    ZeroBlockSize,
    #[error("block table lists a block twice")]
    DuplicateBlock,
    #[error("insufficient blocks: need {needed}, have {available}")]
    InsufficientBlocks { needed: u64, available: u64 },
    #[error("block table uses {table}-byte blocks but pool uses {pool}")]
    BlockSizeMismatch { table: u64, pool: u64 },
    #[error("block {0} is outside the pool")]
    UnknownBlock(u32),
    #[error("invalid link model: {0}")]
    InvalidLink(&'static str),
    #[error("transfer size must be positive")]
    ZeroSize,
    #[error("concurrent transfer count must be at least 1")]
    ZeroConcurrency,
    #[error("elapsed time must be positive and finite")]
    InvalidElapsed,
}
