//! Continuous-batching step planner: running sequences decode one token
//! each, prefill is chunked to fit the token budget, and waiting
//! sequences are admitted FIFO up to the seat limit.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub max_num_seqs: usize,
    pub max_num_batched_tokens: usize,
    pub block_size: usize,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            max_num_seqs: 16,
            max_num_batched_tokens: 256,
            block_size: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqStatus {
    Waiting,
    Running,
    Finished,
}

/// The scheduler's view of one running sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseView {
    /// Generating: exactly one token this step.
    Decode,
    /// Items left to process (prompt or latent tail).
    Prefill { remaining: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduledChunk {
    pub seq_id: u64,
    pub n_items: usize,
    pub is_decode: bool,
}

#[derive(Debug, Clone, Default)]
pub struct StepPlan {
    pub chunks: Vec<ScheduledChunk>,
    /// How many waiting sequences to admit this step (FIFO prefix).
    pub admit: usize,
}

/// Plan one engine step. `running` is ordered by admission; `waiting`
/// carries each queued sequence's initial prefill length.
pub struct Scheduler {
    pub config: SchedulerConfig,
}

impl Scheduler {
    pub fn new(config: SchedulerConfig) -> Self {
        Scheduler { config }
    }

    pub fn plan(&self, running: &[(u64, PhaseView)], waiting: &[(u64, usize)]) -> StepPlan {
        let mut plan = StepPlan::default();
        let mut budget = self.config.max_num_batched_tokens;

        // Running decodes first: one token each.
        for &(id, phase) in running {
            if budget == 0 {
                break;
            }
            if phase == PhaseView::Decode {
                plan.chunks.push(ScheduledChunk {
                    seq_id: id,
                    n_items: 1,
                    is_decode: true,
                });
                budget -= 1;
            }
        }
        // Continue running prefills, chunked to the remaining budget.
        for &(id, phase) in running {
            if budget == 0 {
                break;
            }
            if let PhaseView::Prefill { remaining } = phase {
                let take = remaining.min(budget);
                if take > 0 {
                    plan.chunks.push(ScheduledChunk {
                        seq_id: id,
                        n_items: take,
                        is_decode: false,
                    });
                    budget -= take;
                }
            }
        }
        // Admit waiting sequences FIFO while seats and budget remain.
        let mut seats = self.config.max_num_seqs.saturating_sub(running.len());
        for &(id, prefill_len) in waiting {
            if seats == 0 || budget == 0 {
                break;
            }
            let take = prefill_len.min(budget);
            plan.chunks.push(ScheduledChunk {
                seq_id: id,
                n_items: take,
                is_decode: false,
            });
            budget -= take;
            seats -= 1;
            plan.admit += 1;
        }
        plan
    }
}
