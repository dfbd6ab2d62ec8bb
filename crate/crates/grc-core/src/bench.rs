//! Latency benchmark: each pattern timed on the naive batch-1 loop and on
//! the batched paged engine, with warmup queries excluded and wall time
//! from a monotonic clock.

use crate::error::{GrcError, Result};
use crate::memory::CompressedMemory;
use crate::paged::{EngineConfig, HpaEngine};
use crate::patterns::{compress_text, hpa_spec, run_naive, MemorySource, Pattern, PatternRequest};
use crate::serve::ServingModel;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

pub const WARMUP_QUERIES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReportRow {
    pub pattern: String,
    pub implementation: String,
    pub max_new_tokens: usize,
    pub mean_seconds: f64,
    pub queries: usize,
}

/// Emit rows as `pattern,implementation,max_new_tokens,mean_seconds,queries`.
pub fn write_bench_csv(path: &Path, rows: &[BenchReportRow]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(render_bench_csv(rows).as_bytes())?;
    Ok(())
}

pub fn render_bench_csv(rows: &[BenchReportRow]) -> String {
    let mut out = String::from("pattern,implementation,max_new_tokens,mean_seconds,queries\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.pattern, r.implementation, r.max_new_tokens, r.mean_seconds, r.queries
        ));
    }
    out
}

pub fn parse_bench_csv(text: &str) -> Result<Vec<BenchReportRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(GrcError::MalformedRecord(format!("csv line {}", i + 1)));
        }
        rows.push(BenchReportRow {
            pattern: fields[0].to_owned(),
            implementation: fields[1].to_owned(),
            max_new_tokens: fields[2]
                .parse()
                .map_err(|e| GrcError::MalformedRecord(format!("csv line {}: {e}", i + 1)))?,
            mean_seconds: fields[3]
                .parse()
                .map_err(|e| GrcError::MalformedRecord(format!("csv line {}: {e}", i + 1)))?,
            queries: fields[4]
                .parse()
                .map_err(|e| GrcError::MalformedRecord(format!("csv line {}: {e}", i + 1)))?,
        });
    }
    Ok(rows)
}

/// A benchmark workload: one pattern, many queries sharing an instruction
/// prefix (so prefix caching has real work to do), plus any memories the
/// rag pattern needs.
#[derive(Debug, Clone)]
pub struct BenchWorkload {
    pub pattern: Pattern,
    pub requests: Vec<PatternRequest>,
    pub memories: Vec<CompressedMemory>,
}

/// Build a synthetic workload of `n` queries for a pattern. Queries share
/// a fixed instruction header and differ in their final question.
pub fn synth_workload(
    model: &ServingModel,
    pattern: Pattern,
    n: usize,
    max_new_tokens: usize,
) -> Result<BenchWorkload> {
    let header = "You are a careful assistant. Answer the question precisely, \
citing the station log when one is provided. Keep the answer short.";
    let mut memories = Vec::new();
    if pattern == Pattern::LatentRag {
        for i in 0..4usize {
            memories.push(compress_text(
                model,
                &crate::synth::doc_text(i),
                &format!("bench-doc-{i}"),
            )?);
        }
    }
    let requests = (0..n)
        .map(|i| {
            let mut req = PatternRequest::new(
                pattern,
                &format!("{header}\nQuestion {i}: code of {}?", crate::synth::key_phrase(i % 64)),
            );
            req.max_new_tokens = max_new_tokens;
            req.temperature = 0.0;
            req.seed = i as u64;
            if pattern == Pattern::LatentRag {
                req.doc_ids = vec![format!("bench-doc-{}", i % 4)];
            }
            if pattern == Pattern::DocEmbed {
                req.prompt = format!("{header} {}", crate::synth::doc_text(i % 64));
            }
            Ok(req)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchWorkload {
        pattern,
        requests,
        memories,
    })
}

/// Time one workload on both implementations. The naive loop runs the
/// queries sequentially on a single worker; the engine takes the whole
/// batch at once.
pub fn bench_latency(
    model: &ServingModel,
    engine_config: &EngineConfig,
    workload: &BenchWorkload,
) -> Result<Vec<BenchReportRow>> {
    if workload.requests.is_empty() {
        return Err(GrcError::InvalidInput("workload is empty".into()));
    }
    let max_new = workload.requests[0].max_new_tokens;
    let timed = &workload.requests;

    // Warmup (excluded from means).
    for req in timed.iter().take(WARMUP_QUERIES) {
        run_naive(model, req, MemorySource::Inline(&workload.memories))?;
    }

    let naive_start = Instant::now();
    for req in timed {
        run_naive(model, req, MemorySource::Inline(&workload.memories))?;
    }
    let naive_mean = naive_start.elapsed().as_secs_f64() / timed.len() as f64;

    // Engine path: fresh engine, batch submission.
    let mut engine = HpaEngine::new(clone_serving(model), engine_config);
    for req in timed.iter().take(WARMUP_QUERIES) {
        let (spec, _) = hpa_spec(model, req, MemorySource::Inline(&workload.memories))?;
        engine.submit(spec)?;
    }
    engine.run_until_idle()?;
    engine.clear_caches();

    let hpa_start = Instant::now();
    for req in timed {
        let (spec, _) = hpa_spec(model, req, MemorySource::Inline(&workload.memories))?;
        engine.submit(spec)?;
    }
    engine.run_until_idle()?;
    let hpa_mean = hpa_start.elapsed().as_secs_f64() / timed.len() as f64;

    Ok(vec![
        BenchReportRow {
            pattern: workload.pattern.name().to_owned(),
            implementation: "naive".into(),
            max_new_tokens: max_new,
            mean_seconds: naive_mean,
            queries: timed.len(),
        },
        BenchReportRow {
            pattern: workload.pattern.name().to_owned(),
            implementation: "hpa".into(),
            max_new_tokens: max_new,
            mean_seconds: hpa_mean,
            queries: timed.len(),
        },
    ])
}

fn clone_serving(model: &ServingModel) -> ServingModel {
    ServingModel {
        params: model.params.clone(),
        latents: model.latents.clone(),
        head_weight: model.head_weight.clone(),
        head_bias: model.head_bias.clone(),
        fingerprint: model.fingerprint,
    }
}
