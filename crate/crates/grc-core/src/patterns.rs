//! The four generation patterns, runnable on the naive per-request loop
//! and on the paged engine with identical semantics: regular generation,
//! reasoning-then-latent query embedding, document embedding (optionally
//! yielding a compressed memory in the same pass), and latent
//! memory-augmented generation.

use crate::data::{render_chat, DOC_INSTRUCTION, NONE_RESPONSE};
use crate::error::{GrcError, Result};
use crate::memory::{CompressedMemory, MemoryClient, MemoryStore};
use crate::paged::{HpaEngine, SamplingParams, SequenceSpec};
use crate::serve::{request_rng, sample_token, NaiveSession, PromptItem, ServingModel};
use crate::tokenizer::{self, BOM, EOM, ROLE_ASSISTANT, ROLE_USER};
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    RegularGen,
    QueryEmbed,
    DocEmbed,
    LatentRag,
}

impl Pattern {
    pub fn name(&self) -> &'static str {
        match self {
            Pattern::RegularGen => "regular_gen",
            Pattern::QueryEmbed => "query_embed",
            Pattern::DocEmbed => "doc_embed",
            Pattern::LatentRag => "latent_rag",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatternRequest {
    pub pattern: Pattern,
    pub prompt: String,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    #[serde(default)]
    pub doc_ids: Vec<String>,
    /// Also return the latent KV as a compressed memory (doc patterns).
    #[serde(default)]
    pub capture_memory: bool,
}

impl PatternRequest {
    pub fn new(pattern: Pattern, prompt: &str) -> Self {
        PatternRequest {
            pattern,
            prompt: prompt.to_owned(),
            temperature: 0.0,
            max_new_tokens: 64,
            seed: 0,
            doc_ids: Vec::new(),
            capture_memory: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PatternCounters {
    pub prompt_tokens: usize,
    pub generated_tokens: usize,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct PatternResult {
    pub text: String,
    pub embedding: Option<Vec<f32>>,
    pub memory: Option<CompressedMemory>,
    pub counters: PatternCounters,
}

/// Where latent_rag fetches memories from.
pub enum MemorySource<'a> {
    None,
    Local(&'a MemoryStore),
    Remote(&'a mut MemoryClient),
    Inline(&'a [CompressedMemory]),
}

impl MemorySource<'_> {
    fn fetch(&mut self, doc_id: &str) -> Result<CompressedMemory> {
        match self {
            MemorySource::None => Err(GrcError::UnknownDoc(doc_id.to_owned())),
            MemorySource::Local(store) => store.get(doc_id),
            MemorySource::Remote(client) => client.get(doc_id),
            MemorySource::Inline(memories) => memories
                .iter()
                .find(|m| m.meta.doc_id == doc_id)
                .cloned()
                .ok_or_else(|| GrcError::UnknownDoc(doc_id.to_owned())),
        }
    }
}

/// `[BOM][USER] text \n [EOM][BOM][ASSISTANT]` — the generation prompt
/// frame matching the training chat template.
pub fn user_turn_items(text: &str) -> Vec<PromptItem> {
    let mut tokens = vec![BOM, ROLE_USER];
    tokens.extend(tokenizer::tokenize(&format!("{text}\n")));
    tokens.push(EOM);
    tokens.push(BOM);
    tokens.push(ROLE_ASSISTANT);
    tokens.into_iter().map(PromptItem::Token).collect()
}

/// Document-side prompt: the full document chat turn (instruction,
/// document, "None") followed by the latent block, as in training.
pub fn doc_items(model: &ServingModel, doc: &str) -> Vec<PromptItem> {
    let (tokens, _, _) = render_chat(DOC_INSTRUCTION, doc, NONE_RESPONSE);
    let mut items: Vec<PromptItem> = tokens.into_iter().map(PromptItem::Token).collect();
    items.extend(model.latent_items());
    items
}

fn text_of(generated: &[u32]) -> String {
    let trimmed = match generated.last() {
        Some(&t) if t == EOM => &generated[..generated.len() - 1],
        _ => generated,
    };
    tokenizer::detokenize(trimmed)
}

struct SpecPlan {
    items: Vec<PromptItem>,
    memories: Vec<CompressedMemory>,
    sampling: SamplingParams,
    latent_tail: bool,
    capture_memory: Option<String>,
    wants_embedding: bool,
}

fn plan_request(
    model: &ServingModel,
    req: &PatternRequest,
    source: &mut MemorySource,
) -> Result<SpecPlan> {
    let sampling = SamplingParams {
        temperature: req.temperature,
        max_new_tokens: req.max_new_tokens,
        seed: req.seed,
    };
    let capture = req
        .capture_memory
        .then(|| req.doc_ids.first().cloned().unwrap_or_else(|| req.prompt.clone()));
    Ok(match req.pattern {
        Pattern::RegularGen => SpecPlan {
            items: user_turn_items(&req.prompt),
            memories: Vec::new(),
            sampling,
            latent_tail: false,
            capture_memory: None,
            wants_embedding: false,
        },
        Pattern::QueryEmbed => SpecPlan {
            items: user_turn_items(&req.prompt),
            memories: Vec::new(),
            sampling,
            latent_tail: true,
            capture_memory: capture,
            wants_embedding: true,
        },
        Pattern::DocEmbed => SpecPlan {
            items: doc_items(model, &req.prompt),
            memories: Vec::new(),
            sampling: SamplingParams {
                max_new_tokens: 0,
                ..sampling
            },
            latent_tail: false,
            capture_memory: capture,
            wants_embedding: true,
        },
        Pattern::LatentRag => {
            let mut memories = Vec::with_capacity(req.doc_ids.len());
            for doc_id in &req.doc_ids {
                let memory = source.fetch(doc_id)?;
                model.check_fingerprint(memory.meta.model_fingerprint)?;
                memories.push(memory);
            }
            SpecPlan {
                items: user_turn_items(&req.prompt),
                memories,
                sampling,
                latent_tail: false,
                capture_memory: None,
                wants_embedding: false,
            }
        }
    })
}

/// Naive path: one contiguous session per request.
pub fn run_naive(
    model: &ServingModel,
    req: &PatternRequest,
    mut source: MemorySource,
) -> Result<PatternResult> {
    let started = Instant::now();
    let plan = plan_request(model, req, &mut source)?;
    let mut session = NaiveSession::with_memories(model, &plan.memories)?;
    let prompt_tokens = plan.items.len();

    // Advance the prompt in runs of like items so latent blocks form their
    // own chunks (their hidden rows feed pooling, their KV the memory).
    let mut latent_hidden: Vec<Vec<f32>> = Vec::new();
    let mut logits = Vec::new();
    let mut rest = &plan.items[..];
    while !rest.is_empty() {
        let is_latent = matches!(rest[0], PromptItem::Latent(_));
        let run_len = rest
            .iter()
            .take_while(|i| matches!(i, PromptItem::Latent(_)) == is_latent)
            .count();
        let out = session.advance(&rest[..run_len])?;
        if is_latent {
            latent_hidden.extend((0..out.hidden.rows()).map(|i| out.hidden.row(i).to_vec()));
        }
        logits = out.last_logits;
        rest = &rest[run_len..];
    }

    let mut generated: Vec<u32> = Vec::new();
    let mut rng = request_rng(plan.sampling.seed);
    let mut stopped = plan.sampling.max_new_tokens == 0;
    while !stopped {
        let token = sample_token(&logits, plan.sampling.temperature, &mut rng);
        generated.push(token);
        stopped = token == EOM || generated.len() >= plan.sampling.max_new_tokens;
        if !stopped {
            logits = session.advance(&[PromptItem::Token(token)])?.last_logits;
        } else if plan.latent_tail {
            // Forward the final sampled token so the latents see it.
            session.advance(&[PromptItem::Token(token)])?;
        }
    }

    if plan.latent_tail {
        let out = session.advance(&model.latent_items())?;
        latent_hidden.extend((0..out.hidden.rows()).map(|i| out.hidden.row(i).to_vec()));
    }
    let embedding = if plan.wants_embedding {
        Some(model.pool_embedding(&latent_hidden)?)
    } else {
        None
    };
    let memory = match &plan.capture_memory {
        Some(doc_id) => Some(session.extract_memory(doc_id)?),
        None => None,
    };
    Ok(PatternResult {
        text: text_of(&generated),
        embedding,
        memory,
        counters: PatternCounters {
            prompt_tokens,
            generated_tokens: generated.len(),
            seconds: started.elapsed().as_secs_f64(),
        },
    })
}

/// Paged-engine path: submit and drain a single request (batch callers
/// should submit many specs and drain once).
pub fn run_hpa(
    engine: &mut HpaEngine,
    req: &PatternRequest,
    mut source: MemorySource,
) -> Result<PatternResult> {
    let started = Instant::now();
    let plan = plan_request(engine.model(), req, &mut source)?;
    let spec = SequenceSpec {
        prompt: plan.items,
        memories: plan.memories,
        sampling: plan.sampling,
        latent_tail: plan.latent_tail,
        capture_memory: plan.capture_memory,
        stop_at_eom: true,
    };
    let id = engine.submit(spec)?;
    let finished = engine.run_until_idle()?;
    let seq = finished
        .into_iter()
        .find(|f| f.id == id)
        .ok_or_else(|| GrcError::InvalidInput("engine lost the sequence".into()))?;
    finished_to_result(engine.model(), seq, plan.wants_embedding, started)
}

pub(crate) fn finished_to_result(
    model: &ServingModel,
    seq: crate::paged::FinishedSequence,
    wants_embedding: bool,
    started: Instant,
) -> Result<PatternResult> {
    let embedding = if wants_embedding {
        Some(model.pool_embedding(&seq.latent_hidden)?)
    } else {
        None
    };
    Ok(PatternResult {
        text: text_of(&seq.generated),
        embedding,
        memory: seq.memory,
        counters: PatternCounters {
            prompt_tokens: seq.prompt_items,
            generated_tokens: seq.generated.len(),
            seconds: started.elapsed().as_secs_f64(),
        },
    })
}

/// Build the spec for a request without running it (batched HPA callers).
pub fn hpa_spec(
    model: &ServingModel,
    req: &PatternRequest,
    mut source: MemorySource,
) -> Result<(SequenceSpec, bool)> {
    let plan = plan_request(model, req, &mut source)?;
    Ok((
        SequenceSpec {
            prompt: plan.items,
            memories: plan.memories,
            sampling: plan.sampling,
            latent_tail: plan.latent_tail,
            capture_memory: plan.capture_memory,
            stop_at_eom: true,
        },
        plan.wants_embedding,
    ))
}

/// Compress a document into a memory via the document template (the same
/// single pass as document embedding).
pub fn compress_text(model: &ServingModel, text: &str, doc_id: &str) -> Result<CompressedMemory> {
    let (tokens, _, _) = render_chat(DOC_INSTRUCTION, text, NONE_RESPONSE);
    crate::serve::compress_tokens(model, &tokens, doc_id)
}

/// Compress a full chat turn `(u, x, y)` — the training-distribution
/// context shape.
pub fn compress_chat(
    model: &ServingModel,
    u: &str,
    x: &str,
    y: &str,
    doc_id: &str,
) -> Result<CompressedMemory> {
    let (tokens, _, _) = render_chat(u, x, y);
    crate::serve::compress_tokens(model, &tokens, doc_id)
}
