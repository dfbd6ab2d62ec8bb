//! Hybrid paged attention: fixed-size KV blocks holding both regular and
//! compressed (latent-token) KV, block tables, prefix caching keyed by
//! chained content hashes, and compressed-block sharing keyed by doc id.

mod attention;
mod engine;
mod scheduler;

pub use attention::{forward_chunk_paged, paged_attention};
pub use engine::{EngineConfig, FinishedSequence, HpaEngine, SamplingParams, SequenceSpec};
pub use scheduler::{ScheduledChunk, Scheduler, SchedulerConfig, SeqStatus};

use crate::error::{GrcError, Result};
use crate::memory::CompressedMemory;
use crate::model::{fingerprint_digest, LayerKv};
use std::collections::HashMap;

/// Exact KV-cache byte count: `2 · L · H_kv · d_h · N · bytes` (the factor
/// of 2 accounts for storing both keys and values).
pub fn kv_cache_bytes(
    num_layers: usize,
    num_kv_heads: usize,
    head_dim: usize,
    num_tokens: usize,
    elem_bytes: usize,
) -> u64 {
    2 * num_layers as u64
        * num_kv_heads as u64
        * head_dim as u64
        * num_tokens as u64
        * elem_bytes as u64
}

pub type BlockId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Regular,
    /// Holds exactly latent-token KV; immutable once written.
    Compressed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockEntry {
    pub id: BlockId,
    pub filled: usize,
    pub kind: BlockKind,
}

/// Ordered block ids covering a sequence's cached positions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BlockTable {
    pub entries: Vec<BlockEntry>,
}

impl BlockTable {
    pub fn num_tokens(&self) -> usize {
        self.entries.iter().map(|e| e.filled).sum()
    }

    pub fn block_ids(&self) -> Vec<BlockId> {
        self.entries.iter().map(|e| e.id).collect()
    }

    /// Among regular blocks, only the trailing one may be partially
    /// filled; compressed blocks are sealed at whatever fill they hold.
    pub fn validate(&self, block_size: usize) -> Result<()> {
        let last_regular = self
            .entries
            .iter()
            .rposition(|e| e.kind == BlockKind::Regular);
        for (i, e) in self.entries.iter().enumerate() {
            if e.filled > block_size {
                return Err(GrcError::InvalidInput("block overfilled".into()));
            }
            if e.kind == BlockKind::Regular && Some(i) != last_regular && e.filled != block_size {
                return Err(GrcError::InvalidInput(
                    "only the last regular block may be partially filled".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct DocBlocks {
    blocks: Vec<BlockEntry>,
}

/// Pre-allocated per-layer K/V storage cut into fixed-size blocks. A block
/// is either on the free list or carries references from block tables and
/// the prefix/doc caches; `free + referenced = capacity` always.
pub struct BlockPool {
    block_size: usize,
    capacity: usize,
    num_layers: usize,
    kv_dim: usize,
    k: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    free: Vec<BlockId>,
    ref_counts: Vec<u32>,
    prefix_cache: HashMap<u64, BlockId>,
    prefix_order: Vec<u64>,
    doc_cache: HashMap<String, DocBlocks>,
    doc_order: Vec<String>,
}

impl BlockPool {
    pub fn new(block_size: usize, capacity: usize, num_layers: usize, kv_dim: usize) -> Self {
        BlockPool {
            block_size,
            capacity,
            num_layers,
            kv_dim,
            k: (0..num_layers)
                .map(|_| vec![0.0; capacity * block_size * kv_dim])
                .collect(),
            v: (0..num_layers)
                .map(|_| vec![0.0; capacity * block_size * kv_dim])
                .collect(),
            free: (0..capacity).rev().collect(),
            ref_counts: vec![0; capacity],
            prefix_cache: HashMap::new(),
            prefix_order: Vec::new(),
            doc_cache: HashMap::new(),
            doc_order: Vec::new(),
        }
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn free_count(&self) -> usize {
        self.free.len()
    }

    pub fn kv_dim(&self) -> usize {
        self.kv_dim
    }

    /// Blocks required to extend a table by `n_tokens` appended rows.
    pub fn blocks_needed_for_append(&self, table: &BlockTable, n_tokens: usize) -> usize {
        let room = match table.entries.last() {
            Some(e) if e.kind == BlockKind::Regular => self.block_size - e.filled,
            _ => 0,
        };
        n_tokens.saturating_sub(room).div_ceil(self.block_size)
    }

    /// Reserve `ceil(n_tokens / block_size)` fresh blocks for a new
    /// sequence, or signal backpressure.
    pub fn allocate(&mut self, n_tokens: usize) -> Result<Vec<BlockId>> {
        self.allocate_blocks(n_tokens.div_ceil(self.block_size))
    }

    pub fn allocate_blocks(&mut self, count: usize) -> Result<Vec<BlockId>> {
        if self.free.len() < count {
            return Err(GrcError::PoolExhausted {
                needed: count,
                available: self.free.len(),
            });
        }
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let id = self.free.pop().unwrap();
            self.ref_counts[id] = 1;
            out.push(id);
        }
        Ok(out)
    }

    pub fn add_ref(&mut self, id: BlockId) {
        debug_assert!(self.ref_counts[id] > 0, "ref on free block");
        self.ref_counts[id] += 1;
    }

    fn release_one(&mut self, id: BlockId) {
        debug_assert!(self.ref_counts[id] > 0, "double free");
        self.ref_counts[id] -= 1;
        if self.ref_counts[id] == 0 {
            self.free.push(id);
        }
    }

    /// Return all of a table's references; shared blocks stay allocated
    /// while other tables or the caches still hold them.
    pub fn release_table(&mut self, table: &BlockTable) {
        for e in &table.entries {
            self.release_one(e.id);
        }
    }

    fn row_offset(&self, block: BlockId, slot: usize) -> usize {
        (block * self.block_size + slot) * self.kv_dim
    }

    pub fn write_row(&mut self, layer: usize, block: BlockId, slot: usize, k: &[f32], v: &[f32]) {
        let off = self.row_offset(block, slot);
        self.k[layer][off..off + self.kv_dim].copy_from_slice(k);
        self.v[layer][off..off + self.kv_dim].copy_from_slice(v);
    }

    pub fn k_row(&self, layer: usize, block: BlockId, slot: usize) -> &[f32] {
        let off = self.row_offset(block, slot);
        &self.k[layer][off..off + self.kv_dim]
    }

    pub fn v_row(&self, layer: usize, block: BlockId, slot: usize) -> &[f32] {
        let off = self.row_offset(block, slot);
        &self.v[layer][off..off + self.kv_dim]
    }

    /// Append per-layer KV rows in order, filling the trailing regular
    /// block and drawing fresh blocks as needed. Callers must reserve
    /// headroom first (see [`BlockPool::blocks_needed_for_append`]).
    pub fn append_rows(&mut self, table: &mut BlockTable, kv: &[LayerKv<f32>]) -> Result<()> {
        let n = kv.first().map_or(0, |l| l.k.rows());
        for row in 0..n {
            let needs_new = match table.entries.last() {
                Some(e) if e.kind == BlockKind::Regular && e.filled < self.block_size => false,
                _ => true,
            };
            if needs_new {
                let id = self.allocate_blocks(1)?.pop().unwrap();
                table.entries.push(BlockEntry {
                    id,
                    filled: 0,
                    kind: BlockKind::Regular,
                });
            }
            let (id, slot) = {
                let e = table.entries.last().unwrap();
                (e.id, e.filled)
            };
            for (layer, lkv) in kv.iter().enumerate() {
                self.write_row(layer, id, slot, lkv.k.row(row), lkv.v.row(row));
            }
            table.entries.last_mut().unwrap().filled += 1;
        }
        Ok(())
    }

    // --- prefix caching ---------------------------------------------------

    fn chain_hash(prev: u64, tokens: &[u32]) -> u64 {
        let mut bytes = Vec::with_capacity(8 + tokens.len() * 4);
        bytes.extend_from_slice(&prev.to_le_bytes());
        for &t in tokens {
            bytes.extend_from_slice(&t.to_le_bytes());
        }
        fingerprint_digest(&bytes)
    }

    /// Register full regular prompt blocks for reuse. `token_ids` is the
    /// table's token history from position 0; only call for tables whose
    /// rows are all plain prompt tokens at unshifted positions.
    pub fn register_prefix(&mut self, table: &BlockTable, token_ids: &[u32]) {
        let mut hash = PREFIX_SEED;
        let mut covered = 0;
        for e in &table.entries {
            if e.kind != BlockKind::Regular || e.filled != self.block_size {
                break;
            }
            if covered + self.block_size > token_ids.len() {
                break;
            }
            hash = Self::chain_hash(hash, &token_ids[covered..covered + self.block_size]);
            covered += self.block_size;
            if !self.prefix_cache.contains_key(&hash) {
                self.prefix_cache.insert(hash, e.id);
                self.prefix_order.push(hash);
                self.ref_counts[e.id] += 1; // the cache's own reference
            }
        }
    }

    /// Longest chain of cached full blocks matching the prompt. At least
    /// one prompt token is always left to compute so the caller gets
    /// fresh logits. Matched blocks gain a table reference.
    pub fn match_prefix(&mut self, token_ids: &[u32]) -> (Vec<BlockEntry>, usize) {
        if token_ids.len() < 2 {
            return (Vec::new(), 0);
        }
        let max_blocks = (token_ids.len() - 1) / self.block_size;
        let mut hash = PREFIX_SEED;
        let mut entries = Vec::new();
        let mut matched = 0;
        for b in 0..max_blocks {
            let chunk = &token_ids[b * self.block_size..(b + 1) * self.block_size];
            hash = Self::chain_hash(hash, chunk);
            match self.prefix_cache.get(&hash) {
                Some(&id) => {
                    self.ref_counts[id] += 1;
                    entries.push(BlockEntry {
                        id,
                        filled: self.block_size,
                        kind: BlockKind::Regular,
                    });
                    matched += self.block_size;
                }
                None => break,
            }
        }
        (entries, matched)
    }

    // --- compressed blocks --------------------------------------------------

    /// Write (or share) the compressed KV of a document memory. Rows land
    /// in blocks flagged compressed, sealed at exactly the latent count;
    /// repeat injections of the same doc id share the blocks.
    pub fn insert_compressed(&mut self, memory: &CompressedMemory) -> Result<Vec<BlockEntry>> {
        let doc_id = &memory.meta.doc_id;
        if let Some(cached) = self.doc_cache.get(doc_id) {
            let entries = cached.blocks.clone();
            for e in &entries {
                self.ref_counts[e.id] += 1;
            }
            return Ok(entries);
        }
        let layers = memory.to_layer_kv()?;
        if layers.len() != self.num_layers || layers[0].k.cols() != self.kv_dim {
            return Err(GrcError::ShapeMismatch(
                "memory shape does not match pool".into(),
            ));
        }
        let m = memory.meta.m as usize;
        let ids = self.allocate_blocks(m.div_ceil(self.block_size))?;
        let mut entries = Vec::with_capacity(ids.len());
        for (b, &id) in ids.iter().enumerate() {
            let start = b * self.block_size;
            let filled = (m - start).min(self.block_size);
            for slot in 0..filled {
                for (layer, lkv) in layers.iter().enumerate() {
                    self.write_row(layer, id, slot, lkv.k.row(start + slot), lkv.v.row(start + slot));
                }
            }
            entries.push(BlockEntry {
                id,
                filled,
                kind: BlockKind::Compressed,
            });
        }
        for e in &entries {
            self.ref_counts[e.id] += 1; // the doc cache's reference
        }
        self.doc_cache.insert(
            doc_id.clone(),
            DocBlocks {
                blocks: entries.clone(),
            },
        );
        self.doc_order.push(doc_id.clone());
        Ok(entries)
    }

    /// Drop cache-only references (oldest first) until at least `needed`
    /// blocks are free. Returns how many blocks were reclaimed.
    pub fn evict_caches(&mut self, needed: usize) -> usize {
        let before = self.free.len();
        let mut i = 0;
        while self.free.len() < needed && i < self.prefix_order.len() {
            let hash = self.prefix_order[i];
            if let Some(&id) = self.prefix_cache.get(&hash) {
                if self.ref_counts[id] == 1 {
                    self.prefix_cache.remove(&hash);
                    self.prefix_order.remove(i);
                    self.release_one(id);
                    continue;
                }
            } else {
                self.prefix_order.remove(i);
                continue;
            }
            i += 1;
        }
        let mut i = 0;
        while self.free.len() < needed && i < self.doc_order.len() {
            let doc = self.doc_order[i].clone();
            let only_cached = self.doc_cache[&doc]
                .blocks
                .iter()
                .all(|e| self.ref_counts[e.id] == 1);
            if only_cached {
                let cached = self.doc_cache.remove(&doc).unwrap();
                self.doc_order.remove(i);
                for e in &cached.blocks {
                    self.release_one(e.id);
                }
                continue;
            }
            i += 1;
        }
        self.free.len() - before
    }

    /// Audit the accounting invariant: every block is either free or
    /// referenced, and the two partitions cover the capacity exactly.
    pub fn check_invariants(&self) -> Result<()> {
        let referenced = self.ref_counts.iter().filter(|&&c| c > 0).count();
        if referenced + self.free.len() != self.capacity {
            return Err(GrcError::InvalidInput(format!(
                "referenced {referenced} + free {} != capacity {}",
                self.free.len(),
                self.capacity
            )));
        }
        for &id in &self.free {
            if self.ref_counts[id] != 0 {
                return Err(GrcError::InvalidInput("free block has references".into()));
            }
        }
        Ok(())
    }
}

const PREFIX_SEED: u64 = 0x6772_635f_7072_6566; // "grc_pref"
