//! Desk-scale evaluation harnesses: retrieval nDCG@10, reconstruction
//! token metrics, and the embedding-based retrieval pipeline.

use crate::error::{GrcError, Result};
use crate::patterns::{run_naive, MemorySource, Pattern, PatternRequest};
use crate::serve::ServingModel;
use crate::synth::RetrievalEvalSet;
use crate::tokenizer;
use std::collections::HashMap;

/// Normalized discounted cumulative gain over the top `k` of a ranking.
/// `ranking` lists doc indices best-first; `relevance[doc]` is the gain.
/// DCG discounts by `1/log2(rank + 1)` with ranks starting at 1.
pub fn ndcg_at_k(ranking: &[usize], relevance: &[f64], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(GrcError::InvalidInput("k must be ≥ 1".into()));
    }
    if relevance.iter().all(|&r| r <= 0.0) {
        return Err(GrcError::InvalidInput(
            "ndcg undefined without relevant documents".into(),
        ));
    }
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .map(|(idx, &doc)| relevance[doc] * discount(idx + 1))
        .sum();
    let mut ideal: Vec<f64> = relevance.to_vec();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(idx, &gain)| gain * discount(idx + 1))
        .sum();
    Ok(dcg / idcg)
}

/// Token-level reconstruction metrics over the byte tokenizer: whole-text
/// exact match plus bag-of-token precision/recall/F1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconMetrics {
    pub exact_match: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn recon_metrics(reference: &str, hypothesis: &str) -> ReconMetrics {
    let ref_tokens = tokenizer::tokenize(reference);
    let hyp_tokens = tokenizer::tokenize(hypothesis);
    let exact = f64::from(ref_tokens == hyp_tokens);
    let mut counts: HashMap<u32, i64> = HashMap::new();
    for &t in &ref_tokens {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut overlap = 0i64;
    for &t in &hyp_tokens {
        let c = counts.entry(t).or_insert(0);
        if *c > 0 {
            overlap += 1;
            *c -= 1;
        }
    }
    let precision = if hyp_tokens.is_empty() {
        f64::from(ref_tokens.is_empty())
    } else {
        overlap as f64 / hyp_tokens.len() as f64
    };
    let recall = if ref_tokens.is_empty() {
        f64::from(hyp_tokens.is_empty())
    } else {
        overlap as f64 / ref_tokens.len() as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ReconMetrics {
        exact_match: exact,
        precision,
        recall,
        f1,
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    /// Reasoning tokens generated per query before pooling; 0 embeds the
    /// prompt alone.
    pub reasoning_max_tokens: usize,
    pub temperature: f64,
    pub seed: u64,
    pub k: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            reasoning_max_tokens: 24,
            temperature: 0.0,
            seed: 0,
            k: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RetrievalEvalReport {
    pub per_query: Vec<f64>,
    pub mean: f64,
}

/// Embed every document and query, rank by cosine over the unit
/// embeddings, and average nDCG@k.
pub fn eval_retrieval(
    model: &ServingModel,
    eval: &RetrievalEvalSet,
    opts: &EvalOptions,
) -> Result<RetrievalEvalReport> {
    let doc_embeddings: Vec<Vec<f32>> = eval
        .docs
        .iter()
        .map(|doc| {
            let req = PatternRequest::new(Pattern::DocEmbed, doc);
            Ok(run_naive(model, &req, MemorySource::None)?
                .embedding
                .expect("doc embedding"))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut per_query = Vec::with_capacity(eval.queries.len());
    for query in &eval.queries {
        let mut req = PatternRequest::new(Pattern::QueryEmbed, &format!("{}\n{}", query.u, query.x));
        req.max_new_tokens = opts.reasoning_max_tokens;
        req.temperature = opts.temperature;
        req.seed = opts.seed;
        let embedding = run_naive(model, &req, MemorySource::None)?
            .embedding
            .expect("query embedding");
        let mut ranking: Vec<usize> = (0..doc_embeddings.len()).collect();
        let scores: Vec<f64> = doc_embeddings
            .iter()
            .map(|d| cosine(&embedding, d))
            .collect();
        ranking.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let mut relevance = vec![0.0; eval.docs.len()];
        for &r in &query.relevant {
            relevance[r] = 1.0;
        }
        per_query.push(ndcg_at_k(&ranking, &relevance, opts.k)?);
    }
    let mean = per_query.iter().sum::<f64>() / per_query.len().max(1) as f64;
    Ok(RetrievalEvalReport { per_query, mean })
}
