//! Byte-exact KVCache codec.
//!
//! The sender keeps every layer's K/V bytes back to back in one contiguous
//! buffer, so any layer (or the whole cache) is addressed by an offset and a
//! length. The receiver manages HBM as fixed-size blocks and restores the
//! buffer into them with [`recv_scatter`].

use serde::Serialize;

use super::TransferError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Segment {
    pub offset: u64,
    pub len: u64,
}

impl Segment {
    pub fn end(&self) -> u64 {
        self.offset + self.len
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset as usize..self.end() as usize
    }
}

/// Per-layer placement of a request's KVCache in the sender buffer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ContiguousLayout {
    segments: Vec<Segment>,
    total: u64,
}

impl ContiguousLayout {
    /// Builds a layout from explicit per-layer lengths laid out in order.
    pub fn from_lengths(lengths: &[u64]) -> Result<Self, TransferError> {
        if lengths.is_empty() || lengths.contains(&0) {
            return Err(TransferError::EmptySegment);
        }
        let mut offset = 0u64;
        let mut segments = Vec::with_capacity(lengths.len());
        for &len in lengths {
            segments.push(Segment { offset, len });
            offset = offset.checked_add(len).ok_or(TransferError::Overflow)?;
        }
        Ok(Self { segments, total: offset })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn layer(&self, index: usize) -> Option<Segment> {
        self.segments.get(index).copied()
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn num_layers(&self) -> usize {
        self.segments.len()
    }

    /// Contiguous span covering layers `first..=last`, for transfers that
    /// move several layers with a single meta exchange.
    pub fn span(&self, first: usize, last: usize) -> Option<Segment> {
        let a = self.segments.get(first)?;
        let b = self.segments.get(last)?;
        (first <= last).then(|| Segment {
            offset: a.offset,
            len: b.end() - a.offset,
        })
    }
}

/// Layout for one request (batch of one): every layer holds
/// `bytes_per_elem * 2 * hidden_size * prompt_len` bytes.
pub fn layout_buffer(
    prompt_len: u64,
    hidden_size: u64,
    num_layers: u64,
    bytes_per_elem: u64,
) -> Result<ContiguousLayout, TransferError> {
    if prompt_len == 0 || hidden_size == 0 || num_layers == 0 || bytes_per_elem == 0 {
        return Err(TransferError::EmptySegment);
    }
    let per_layer = bytes_per_elem
        .checked_mul(2)
        .and_then(|x| x.checked_mul(hidden_size))
        .and_then(|x| x.checked_mul(prompt_len))
        .ok_or(TransferError::Overflow)?;
    let count = usize::try_from(num_layers).map_err(|_| TransferError::Overflow)?;
    let mut offset = 0u64;
    let mut segments = Vec::with_capacity(count);
    for _ in 0..count {
        segments.push(Segment { offset, len: per_layer });
        offset = offset.checked_add(per_layer).ok_or(TransferError::Overflow)?;
    }
    Ok(ContiguousLayout { segments, total: offset })
}

/// Copies per-layer tensors into `out` at their layout offsets.
pub fn pack_into(layers: &[&[u8]], layout: &ContiguousLayout, out: &mut [u8]) -> Result<(), TransferError> {
    if layers.len() != layout.segments.len() {
        return Err(TransferError::LayerCountMismatch {
            expected: layout.segments.len(),
            actual: layers.len(),
        });
    }
    if out.len() as u64 != layout.total {
        return Err(TransferError::LengthMismatch {
            expected: layout.total,
            actual: out.len() as u64,
        });
    }
    for (layer, seg) in layers.iter().zip(&layout.segments) {
        if layer.len() as u64 != seg.len {
            return Err(TransferError::LengthMismatch {
                expected: seg.len,
                actual: layer.len() as u64,
            });
        }
        out[seg.range()].copy_from_slice(layer);
    }
    Ok(())
}

/// Packs per-layer tensors into a freshly allocated contiguous buffer.
pub fn pack(layers: &[&[u8]], layout: &ContiguousLayout) -> Result<Vec<u8>, TransferError> {
    let mut out = vec![0u8; usize::try_from(layout.total).map_err(|_| TransferError::Overflow)?];
    pack_into(layers, layout, &mut out)?;
    Ok(out)
}

/// Splits an already-flat tensor payload along the layout and packs it.
pub fn pack_flat(payload: &[u8], layout: &ContiguousLayout) -> Result<Vec<u8>, TransferError> {
    if payload.len() as u64 != layout.total {
        return Err(TransferError::LengthMismatch {
            expected: layout.total,
            actual: payload.len() as u64,
        });
    }
    let layers: Vec<&[u8]> = layout.segments.iter().map(|s| &payload[s.range()]).collect();
    pack(&layers, layout)
}

/// Reads one layer back out of a packed buffer.
pub fn layer_slice<'a>(buffer: &'a [u8], layout: &ContiguousLayout, index: usize) -> Option<&'a [u8]> {
    let seg = layout.layer(index)?;
    buffer.get(seg.range())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct BlockId(pub u32);

/// Receiver-side block list for one request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BlockTable {
    block_size: u64,
    blocks: Vec<BlockId>,
    used_bytes: u64,
}

impl BlockTable {
    pub fn new(block_size: u64, blocks: Vec<BlockId>) -> Result<Self, TransferError> {
        if block_size == 0 {
            return Err(TransferError::ZeroBlockSize);
        }
        let mut sorted = blocks.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(TransferError::DuplicateBlock);
        }
        Ok(Self {
            block_size,
            blocks,
            used_bytes: 0,
        })
    }

    pub fn block_size(&self) -> u64 {
        self.block_size
    }

    pub fn blocks(&self) -> &[BlockId] {
        &self.blocks
    }

    pub fn used_bytes(&self) -> u64 {
        self.used_bytes
    }

    pub fn capacity(&self) -> u64 {
        self.blocks.len() as u64 * self.block_size
    }

    /// Number of blocks needed to hold `bytes`.
    pub fn blocks_for(bytes: u64, block_size: u64) -> u64 {
        bytes.div_ceil(block_size)
    }
}

/// Fixed-size block pool standing in for paged HBM.
#[derive(Debug, Clone)]
pub struct BlockPool {
    block_size: u64,
    storage: Vec<u8>,
    free: Vec<BlockId>,
}

impl BlockPool {
    pub fn new(block_size: u64, num_blocks: u32) -> Result<Self, TransferError> {
        if block_size == 0 {
            return Err(TransferError::ZeroBlockSize);
        }
        let bytes = block_size
            .checked_mul(u64::from(num_blocks))
            .and_then(|b| usize::try_from(b).ok())
            .ok_or(TransferError::Overflow)?;
        Ok(Self {
            block_size,
            storage: vec![0u8; bytes],
            // Reversed so allocation hands out ascending ids.
            free: (0..num_blocks).rev().map(BlockId).collect(),
        })
    }

    pub fn block_size(&self) -> u64 {
        self.block_size
    }

    pub fn free_blocks(&self) -> usize {
        self.free.len()
    }

    pub fn num_blocks(&self) -> usize {
        self.storage.len() / self.block_size as usize
    }

    /// Allocates enough blocks for `bytes`.
    pub fn allocate(&mut self, bytes: u64) -> Result<BlockTable, TransferError> {
        let needed = BlockTable::blocks_for(bytes, self.block_size) as usize;
        if needed > self.free.len() {
            return Err(TransferError::InsufficientBlocks {
                needed: needed as u64,
                available: self.free.len() as u64,
            });
        }
        let at = self.free.len() - needed;
        let mut blocks = self.free.split_off(at);
        blocks.reverse();
        BlockTable::new(self.block_size, blocks)
    }

    pub fn release(&mut self, table: BlockTable) {
        self.free.extend(table.blocks.into_iter().rev());
    }

    pub fn block(&self, id: BlockId) -> Option<&[u8]> {
        let start = id.0 as usize * self.block_size as usize;
        self.storage.get(start..start + self.block_size as usize)
    }

    fn block_mut(&mut self, id: BlockId) -> Option<&mut [u8]> {
        let start = id.0 as usize * self.block_size as usize;
        let end = start + self.block_size as usize;
        self.storage.get_mut(start..end)
    }
}

/// Restores a contiguous buffer into the table's blocks in order. The last
/// block may be partially filled.
pub fn recv_scatter(buffer: &[u8], table: &mut BlockTable, pool: &mut BlockPool) -> Result<(), TransferError> {
    if table.block_size != pool.block_size {
        return Err(TransferError::BlockSizeMismatch {
            table: table.block_size,
            pool: pool.block_size,
        });
    }
    let len = buffer.len() as u64;
    if len > table.capacity() {
        return Err(TransferError::InsufficientBlocks {
            needed: BlockTable::blocks_for(len, table.block_size),
            available: table.blocks.len() as u64,
        });
    }
    for (chunk, &id) in buffer.chunks(table.block_size as usize).zip(&table.blocks) {
        let block = pool.block_mut(id).ok_or(TransferError::UnknownBlock(id.0))?;
        block[..chunk.len()].copy_from_slice(chunk);
    }
    table.used_bytes = len;
    Ok(())
}

/// Reads `table.used_bytes()` back from the blocks into one buffer: the
/// sender-side inverse of [`recv_scatter`], used to build a contiguous buffer
/// from paged memory.
pub fn gather(table: &BlockTable, pool: &BlockPool) -> Result<Vec<u8>, TransferError> {
    let mut out = Vec::with_capacity(table.used_bytes as usize);
    let mut remaining = table.used_bytes as usize;
    for &id in &table.blocks {
        if remaining == 0 {
            break;
        }
        let block = pool.block(id).ok_or(TransferError::UnknownBlock(id.0))?;
        let take = remaining.min(block.len());
        out.extend_from_slice(&block[..take]);
        remaining -= take;
    }
    Ok(out)
}
