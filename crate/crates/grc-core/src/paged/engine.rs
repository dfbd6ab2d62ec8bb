//! The serving engine: continuous batching over the block pool, with
//! prefix reuse, compressed-memory injection, deterministic preemption
//! and per-request sampling.

use super::attention::forward_chunk_paged;
use super::scheduler::{PhaseView, ScheduledChunk, Scheduler, SchedulerConfig};
use super::{BlockPool, BlockTable};
use crate::error::{GrcError, Result};
use crate::linalg::Mat;
use crate::mask::build_causal_mask;
use crate::memory::CompressedMemory;
use crate::model::LayerKv;
use crate::serve::{sample_token, PromptItem, ServingModel};
use crate::tokenizer::EOM;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: 0.0,
            max_new_tokens: 64,
            seed: 0,
        }
    }
}

/// Engine configuration (persisted as JSON).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub block_size: usize,
    /// Pool budget in bytes; block capacity is derived from the model
    /// shape.
    pub pool_bytes: u64,
    pub max_num_seqs: usize,
    pub max_num_batched_tokens: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            block_size: 16,
            pool_bytes: 64 * 1024 * 1024,
            max_num_seqs: 16,
            max_num_batched_tokens: 256,
        }
    }
}

impl EngineConfig {
    pub fn scheduler(&self) -> SchedulerConfig {
        SchedulerConfig {
            max_num_seqs: self.max_num_seqs,
            max_num_batched_tokens: self.max_num_batched_tokens,
            block_size: self.block_size,
        }
    }
}

/// One request: prompt items, optional injected memories, sampling, and
/// what to collect on the way out.
#[derive(Debug, Clone)]
pub struct SequenceSpec {
    pub prompt: Vec<PromptItem>,
    pub memories: Vec<CompressedMemory>,
    pub sampling: SamplingParams,
    /// Append the latent block after generation and capture its hidden
    /// states (the self-reason-latent embedding pattern).
    pub latent_tail: bool,
    /// Extract the latent rows' KV as a compressed memory under this id.
    pub capture_memory: Option<String>,
    pub stop_at_eom: bool,
}

impl SequenceSpec {
    pub fn text_prompt(prompt: Vec<PromptItem>, sampling: SamplingParams) -> Self {
        SequenceSpec {
            prompt,
            memories: Vec::new(),
            sampling,
            latent_tail: false,
            capture_memory: None,
            stop_at_eom: true,
        }
    }
}

#[derive(Debug)]
pub struct FinishedSequence {
    pub id: u64,
    pub generated: Vec<u32>,
    pub latent_hidden: Vec<Vec<f32>>,
    pub memory: Option<CompressedMemory>,
    pub prompt_items: usize,
    /// Prompt tokens skipped via prefix-cache hits.
    pub reused_tokens: usize,
}

struct Seq {
    id: u64,
    spec: SequenceSpec,
    items: Vec<PromptItem>,
    processed: usize,
    table: BlockTable,
    start_position: usize,
    generated: Vec<u32>,
    stopped: bool,
    latent_tail_added: bool,
    latent_hidden: Vec<Vec<f32>>,
    latent_kv: Option<Vec<LayerKv<f32>>>,
    latent_positions: Vec<usize>,
    last_logits: Vec<f32>,
    rng: ChaCha8Rng,
    admitted_at: u64,
    token_prefix: Vec<u32>,
    reused_tokens: usize,
}

impl Seq {
    fn in_generation(&self) -> bool {
        !self.stopped && self.spec.sampling.max_new_tokens > 0
    }

    fn phase_view(&self) -> PhaseView {
        let remaining = self.items.len() - self.processed;
        if remaining == 1 && self.in_generation() && !self.generated.is_empty() {
            PhaseView::Decode
        } else {
            PhaseView::Prefill { remaining }
        }
    }
}

pub struct HpaEngine {
    model: ServingModel,
    pool: BlockPool,
    scheduler: Scheduler,
    waiting: VecDeque<Seq>,
    running: Vec<Seq>,
    finished: Vec<FinishedSequence>,
    next_id: u64,
    admission_counter: u64,
    pub parallel: bool,
}

impl HpaEngine {
    pub fn new(model: ServingModel, config: &EngineConfig) -> Self {
        let c = model.config();
        let block_bytes =
            super::kv_cache_bytes(c.num_layers, c.num_kv_heads, c.head_dim, config.block_size, 4);
        let capacity = (config.pool_bytes / block_bytes.max(1)).max(1) as usize;
        let pool = BlockPool::new(config.block_size, capacity, c.num_layers, c.kv_dim());
        HpaEngine {
            scheduler: Scheduler::new(config.scheduler()),
            pool,
            model,
            waiting: VecDeque::new(),
            running: Vec::new(),
            finished: Vec::new(),
            next_id: 0,
            admission_counter: 0,
            parallel: true,
        }
    }

    pub fn model(&self) -> &ServingModel {
        &self.model
    }

    pub fn pool(&self) -> &BlockPool {
        &self.pool
    }

    pub fn submit(&mut self, spec: SequenceSpec) -> Result<u64> {
        if spec.prompt.is_empty() {
            return Err(GrcError::InvalidInput("empty prompt".into()));
        }
        for memory in &spec.memories {
            self.model.check_fingerprint(memory.meta.model_fingerprint)?;
        }
        let id = self.next_id;
        self.next_id += 1;
        self.waiting.push_back(self.build_seq(id, spec));
        Ok(id)
    }

    fn build_seq(&self, id: u64, spec: SequenceSpec) -> Seq {
        let token_prefix: Vec<u32> = spec
            .prompt
            .iter()
            .map_while(|item| match item {
                PromptItem::Token(t) => Some(*t),
                PromptItem::Latent(_) => None,
            })
            .collect();
        Seq {
            id,
            items: spec.prompt.clone(),
            processed: 0,
            table: BlockTable::default(),
            start_position: 0,
            generated: Vec::new(),
            stopped: spec.sampling.max_new_tokens == 0,
            latent_tail_added: false,
            latent_hidden: Vec::new(),
            latent_kv: None,
            latent_positions: Vec::new(),
            last_logits: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(spec.sampling.seed),
            admitted_at: 0,
            token_prefix,
            reused_tokens: 0,
            spec,
        }
    }

    pub fn has_work(&self) -> bool {
        !self.waiting.is_empty() || !self.running.is_empty()
    }

    pub fn take_finished(&mut self) -> Vec<FinishedSequence> {
        std::mem::take(&mut self.finished)
    }

    /// Drop all prefix- and doc-cache block references not otherwise in
    /// use (e.g. between benchmark runs).
    pub fn clear_caches(&mut self) {
        self.pool.evict_caches(usize::MAX);
    }

    /// Run steps until every submitted sequence has finished.
    pub fn run_until_idle(&mut self) -> Result<Vec<FinishedSequence>> {
        while self.has_work() {
            self.step()?;
        }
        Ok(self.take_finished())
    }

    /// Free enough blocks for `needed`, evicting cache-only blocks first
    /// and then preempting the most recently admitted other sequence.
    fn make_room(&mut self, needed: usize, current: u64) -> Result<()> {
        loop {
            if self.pool.free_count() >= needed {
                return Ok(());
            }
            self.pool.evict_caches(needed);
            if self.pool.free_count() >= needed {
                return Ok(());
            }
            // Preempt the most recently admitted running sequence other
            // than the one asking for room; it is re-queued whole.
            let victim = self
                .running
                .iter()
                .enumerate()
                .filter(|(_, s)| s.id != current)
                .max_by_key(|(_, s)| s.admitted_at)
                .map(|(i, _)| i);
            match victim {
                Some(idx) => {
                    let seq = self.running.remove(idx);
                    self.pool.release_table(&seq.table);
                    let rebuilt = self.build_seq(seq.id, seq.spec);
                    self.waiting.push_front(rebuilt);
                }
                None => {
                    return Err(GrcError::PoolExhausted {
                        needed,
                        available: self.pool.free_count(),
                    })
                }
            }
        }
    }

    /// Admit one waiting sequence: inject memories, then try prefix reuse.
    fn admit_front(&mut self) -> Result<()> {
        let mut seq = self.waiting.pop_front().expect("admit on empty queue");
        let mut start_position = 0usize;
        if !seq.spec.memories.is_empty() {
            let blocks_needed: usize = seq
                .spec
                .memories
                .iter()
                .map(|mem| (mem.meta.m as usize).div_ceil(self.pool.block_size()))
                .sum();
            if let Err(e) = self.make_room(blocks_needed, seq.id) {
                self.waiting.push_front(seq);
                return Err(e);
            }
            for memory in &seq.spec.memories {
                let entries = self.pool.insert_compressed(memory)?;
                seq.table.entries.extend(entries);
                start_position = start_position.max(memory.max_position().map_or(0, |p| p + 1));
            }
        } else if !seq.token_prefix.is_empty() {
            let (entries, matched) = self.pool.match_prefix(&seq.token_prefix);
            seq.table.entries.extend(entries);
            seq.processed = matched;
            seq.reused_tokens = matched;
        }
        seq.start_position = start_position;
        self.admission_counter += 1;
        seq.admitted_at = self.admission_counter;
        self.running.push(seq);
        Ok(())
    }

    /// One scheduling + compute + commit iteration.
    pub fn step(&mut self) -> Result<()> {
        // Plan against the current running set, then admit.
        let running_view: Vec<(u64, PhaseView)> =
            self.running.iter().map(|s| (s.id, s.phase_view())).collect();
        let waiting_view: Vec<(u64, usize)> = self
            .waiting
            .iter()
            .map(|s| (s.id, s.items.len() - s.processed))
            .collect();
        let plan = self.scheduler.plan(&running_view, &waiting_view);
        for _ in 0..plan.admit {
            match self.admit_front() {
                Ok(()) => {}
                Err(GrcError::PoolExhausted { .. }) => break,
                Err(e) => return Err(e),
            }
        }

        // Snapshot compute inputs per scheduled chunk.
        struct ChunkJob {
            seq_id: u64,
            embedded: Mat<f32>,
            positions: Vec<usize>,
            table: BlockTable,
            items: Vec<PromptItem>,
        }
        let mut jobs: Vec<ChunkJob> = Vec::new();
        for ScheduledChunk { seq_id, n_items, .. } in &plan.chunks {
            let Some(seq) = self.running.iter().find(|s| s.id == *seq_id) else {
                continue;
            };
            let take = (*n_items).min(seq.items.len() - seq.processed);
            if take == 0 {
                continue;
            }
            let items: Vec<PromptItem> =
                seq.items[seq.processed..seq.processed + take].to_vec();
            let embedded = self.model.embed_items(&items)?;
            let positions: Vec<usize> = (seq.start_position + seq.processed
                ..seq.start_position + seq.processed + take)
                .collect();
            jobs.push(ChunkJob {
                seq_id: *seq_id,
                embedded,
                positions,
                table: seq.table.clone(),
                items,
            });
        }

        // Compute phase: pool and model are read-only.
        let model = &self.model;
        let pool = &self.pool;
        type ChunkResult = (Mat<f32>, Vec<f32>, Vec<LayerKv<f32>>);
        let run_job = |job: &ChunkJob| -> Result<ChunkResult> {
            let mask = build_causal_mask(job.embedded.rows());
            forward_chunk_paged(model, pool, &job.table, job.embedded.clone(), &job.positions, &mask)
        };
        let results: Vec<Result<ChunkResult>> = if self.parallel {
            jobs.par_iter().map(run_job).collect()
        } else {
            jobs.iter().map(run_job).collect()
        };

        // Commit phase, in plan order.
        for (job, result) in jobs.into_iter().zip(results) {
            let (hidden, last_logits, new_kv) = result?;
            // The sequence may have been preempted by an earlier commit in
            // this very step; drop the stale result.
            let Some(idx) = self.running.iter().position(|s| s.id == job.seq_id) else {
                continue;
            };
            let needed = {
                let seq = &self.running[idx];
                self.pool
                    .blocks_needed_for_append(&seq.table, job.items.len())
            };
            self.make_room(needed, job.seq_id)?;
            let Some(idx) = self.running.iter().position(|s| s.id == job.seq_id) else {
                continue;
            };
            let seq = &mut self.running[idx];
            self.pool.append_rows(&mut seq.table, &new_kv)?;
            // Capture latent rows (hidden + KV) as they stream through.
            for (offset, item) in job.items.iter().enumerate() {
                if matches!(item, PromptItem::Latent(_)) {
                    seq.latent_hidden.push(hidden.row(offset).to_vec());
                    seq.latent_positions.push(job.positions[offset]);
                    match &mut seq.latent_kv {
                        None => {
                            seq.latent_kv = Some(
                                new_kv
                                    .iter()
                                    .map(|l| LayerKv {
                                        k: Mat::from_rows(&[l.k.row(offset)]),
                                        v: Mat::from_rows(&[l.v.row(offset)]),
                                    })
                                    .collect(),
                            );
                        }
                        Some(acc) => {
                            for (dst, src) in acc.iter_mut().zip(&new_kv) {
                                dst.k.append_rows(&Mat::from_rows(&[src.k.row(offset)]));
                                dst.v.append_rows(&Mat::from_rows(&[src.v.row(offset)]));
                            }
                        }
                    }
                }
            }
            seq.processed += job.items.len();
            seq.last_logits = last_logits;
            // Register freshly filled prompt blocks for prefix reuse
            // (pure token prompts at unshifted positions only).
            if seq.spec.memories.is_empty() && !seq.token_prefix.is_empty() {
                let covered = seq.processed.min(seq.token_prefix.len());
                let prefix = seq.token_prefix[..covered].to_vec();
                self.pool.register_prefix(&seq.table, &prefix);
            }
            self.advance_after_chunk(idx)?;
        }
        Ok(())
    }

    /// Sample / extend / finish a sequence whose pending items are all
    /// processed.
    fn advance_after_chunk(&mut self, idx: usize) -> Result<()> {
        let seq = &mut self.running[idx];
        if seq.processed < seq.items.len() {
            return Ok(());
        }
        if seq.in_generation() {
            let token = sample_token(
                &seq.last_logits,
                seq.spec.sampling.temperature,
                &mut seq.rng,
            );
            seq.generated.push(token);
            let hit_eom = seq.spec.stop_at_eom && token == EOM;
            let hit_limit = seq.generated.len() >= seq.spec.sampling.max_new_tokens;
            if hit_eom || hit_limit {
                seq.stopped = true;
                if seq.spec.latent_tail {
                    // Forward the final sampled token, then the latents.
                    seq.items.push(PromptItem::Token(token));
                    seq.items.extend(self.model.latent_items());
                    seq.latent_tail_added = true;
                    return Ok(());
                }
            } else {
                seq.items.push(PromptItem::Token(token));
                return Ok(());
            }
        }
        if seq.stopped && seq.spec.latent_tail && !seq.latent_tail_added {
            // No generation happened (max_new_tokens = 0): append latents.
            seq.items.extend(self.model.latent_items());
            seq.latent_tail_added = true;
            return Ok(());
        }
        // Done: package outputs and release blocks.
        let seq = self.running.remove(idx);
        let memory = match (&seq.spec.capture_memory, &seq.latent_kv) {
            (Some(doc_id), Some(kv)) => Some(CompressedMemory::from_layer_kv(
                doc_id,
                self.model.fingerprint,
                &seq.latent_positions,
                kv,
                self.model.config().num_kv_heads,
                self.model.config().head_dim,
            )?),
            (Some(_), None) => {
                return Err(GrcError::InvalidInput(
                    "memory capture requested but no latent rows were processed".into(),
                ))
            }
            _ => None,
        };
        self.pool.release_table(&seq.table);
        self.finished.push(FinishedSequence {
            id: seq.id,
            generated: seq.generated,
            latent_hidden: seq.latent_hidden,
            memory,
            prompt_items: seq.spec.prompt.len(),
            reused_tokens: seq.reused_tokens,
        });
        Ok(())
    }
}
