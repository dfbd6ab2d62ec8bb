//! The three training objectives and the combined loss.
//!
//! One forward pass per sequence produces the generation loss (response
//! span), the reconstruction loss (recovered-context span under the
//! reconstruction mask) and the latent-pooled embedding; the contrastive
//! term couples the embeddings across the query/positive/negative
//! sequences of a unified example.

mod gradcheck;
mod train;

pub use gradcheck::{central_diff_check, grad_check, GradCheckReport};
pub use train::{train_toy, write_loss_csv, StepLoss, TrainConfig};

use crate::bundle::{GrcGrads, GrcModel};
use crate::data::UnifiedExample;
use crate::error::{GrcError, Result};
use crate::linalg::{dot, l2_norm, Mat};
use crate::mask::SegmentLayout;
use crate::model::{backward, forward_traced, gaussian_stream, ForwardInput, ForwardOutput};
use std::ops::Range;

/// Affine adapter over latent hidden states, followed by mean pooling and
/// L2 normalization. Output vectors have unit norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingHead {
    /// `hidden_dim × embed_dim`
    pub weight: Mat<f64>,
    pub bias: Vec<f64>,
}

impl EmbeddingHead {
    pub fn init(hidden_dim: usize, embed_dim: usize, seed: u64) -> Self {
        let mut stream = gaussian_stream(seed, "adapter.weight");
        let data = (0..hidden_dim * embed_dim)
            .map(|_| stream.next_scaled())
            .collect();
        EmbeddingHead {
            weight: Mat::from_vec(hidden_dim, embed_dim, data),
            bias: vec![0.0; embed_dim],
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Per-term weights of the combined loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(GrcError::InvalidConfig("loss weights must be ≥ 0".into()));
        }
        if self.alpha == 0.0 && self.beta == 0.0 && self.gamma == 0.0 {
            return Err(GrcError::InvalidConfig("all loss weights are zero".into()));
        }
        Ok(())
    }
}

/// Contrastive similarity scaling: logits are `cos(q, d) / temperature`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityScale {
    pub temperature: f64,
}

impl Default for SimilarityScale {
    fn default() -> Self {
        SimilarityScale { temperature: 0.02 }
    }
}

impl SimilarityScale {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(GrcError::InvalidConfig("temperature must be > 0".into()));
        }
        Ok(SimilarityScale { temperature })
    }

    pub fn scale(&self) -> f64 {
        1.0 / self.temperature
    }
}

fn log_softmax_at(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    logits[target] - lse
}

/// Mean negative log-likelihood of `targets[i]` for `i` in `span`,
/// next-token aligned: position `i` is predicted from the logits at row
/// `i - 1`.
fn span_nll(logits: &Mat<f64>, targets: &[u32], span: &Range<usize>) -> Result<f64> {
    if span.is_empty() {
        return Err(GrcError::InvalidInput("empty loss span".into()));
    }
    if span.start == 0 || span.end > logits.rows() {
        return Err(GrcError::InvalidInput(format!(
            "span {span:?} out of range for {} rows",
            logits.rows()
        )));
    }
    let mut total = 0.0;
    for i in span.clone() {
        total -= log_softmax_at(logits.row(i - 1), targets[i] as usize);
    }
    Ok(total / span.len() as f64)
}

/// Adds `weight × d(span_nll)/d(logits)` into `d_logits`.
fn span_nll_grad(
    logits: &Mat<f64>,
    targets: &[u32],
    span: &Range<usize>,
    weight: f64,
    d_logits: &mut Mat<f64>,
) {
    let scale = weight / span.len() as f64;
    for i in span.clone() {
        let row = logits.row(i - 1);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let d_row = d_logits.row_mut(i - 1);
        for (j, &v) in row.iter().enumerate() {
            d_row[j] += scale * (v - max).exp() / denom;
        }
        d_row[targets[i] as usize] -= scale;
    }
}

/// Generation loss: mean NLL of the response span within segment ①.
pub fn loss_gen(output: &ForwardOutput, targets: &[u32], span: &Range<usize>) -> Result<f64> {
    span_nll(&output.logits, targets, span)
}

/// Reconstruction loss: mean NLL over the recovered-context span of
/// segment ④. The forward must have run under the reconstruction mask
/// for the same layout.
pub fn loss_recons(output: &ForwardOutput, layout: &SegmentLayout, targets: &[u32]) -> Result<f64> {
    if layout.t == 0 {
        return Err(GrcError::InvalidInput(
            "reconstruction loss requires a non-empty segment ④".into(),
        ));
    }
    span_nll(&output.logits, targets, &layout.recon_range())
}

/// Pool latent hidden states into one unit-norm embedding:
/// `normalize(mean_i A(h_i))`.
pub fn embed(latent_hidden: &Mat<f64>, head: &EmbeddingHead) -> Result<Vec<f64>> {
    if latent_hidden.rows() == 0 {
        return Err(GrcError::InvalidInput(
            "embedding requires at least one latent hidden state".into(),
        ));
    }
    // mean_i A(h_i) = mean_i(h_i·W) + b
    let m = latent_hidden.rows() as f64;
    let mut pooled = head.bias.clone();
    for i in 0..latent_hidden.rows() {
        let h = latent_hidden.row(i);
        for (j, p) in pooled.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (t, &hv) in h.iter().enumerate() {
                acc += hv * head.weight.get(t, j);
            }
            *p += acc / m;
        }
    }
    let norm = l2_norm(&pooled);
    if norm < 1e-12 {
        return Err(GrcError::ZeroNormEmbedding);
    }
    Ok(pooled.iter().map(|v| v / norm).collect())
}

/// Backward of [`embed`]: given `d_e`, returns the gradient on the latent
/// hidden rows and accumulates adapter grads.
fn embed_backward(
    latent_hidden: &Mat<f64>,
    head: &EmbeddingHead,
    e: &[f64],
    d_e: &[f64],
    d_weight: &mut Mat<f64>,
    d_bias: &mut [f64],
) -> Mat<f64> {
    // Recompute the pooled pre-normalization vector and its norm.
    let m = latent_hidden.rows() as f64;
    let mut pooled = head.bias.clone();
    for i in 0..latent_hidden.rows() {
        let h = latent_hidden.row(i);
        for (j, p) in pooled.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (t, &hv) in h.iter().enumerate() {
                acc += hv * head.weight.get(t, j);
            }
            *p += acc / m;
        }
    }
    let norm = l2_norm(&pooled);
    // e = p / ‖p‖ ⇒ dp = (de − e (e·de)) / ‖p‖
    let e_dot = dot(e, d_e);
    let dp: Vec<f64> = d_e
        .iter()
        .zip(e)
        .map(|(&de, &ev)| (de - ev * e_dot) / norm)
        .collect();
    for (j, &dpj) in dp.iter().enumerate() {
        d_bias[j] += dpj;
    }
    let mut d_hidden = Mat::zeros(latent_hidden.rows(), latent_hidden.cols());
    for i in 0..latent_hidden.rows() {
        let h = latent_hidden.row(i);
        let dh = d_hidden.row_mut(i);
        for (j, &dpj) in dp.iter().enumerate() {
            let da = dpj / m;
            for t in 0..h.len() {
                d_weight.data_mut()[t * head.embed_dim() + j] += h[t] * da;
                dh[t] += da * head.weight.get(t, j);
            }
        }
    }
    d_hidden
}

/// InfoNCE over cosine similarities scaled by the inverse temperature.
/// All embeddings must be unit-norm; candidates are the positive plus the
/// negatives (`M = 1 + |negs| ≥ 2`).
pub fn loss_rep(
    e_q: &[f64],
    e_pos: &[f64],
    e_negs: &[&[f64]],
    scale: &SimilarityScale,
) -> Result<f64> {
    let (loss, _) = rep_logits(e_q, e_pos, e_negs, scale)?;
    Ok(loss)
}

fn rep_logits(
    e_q: &[f64],
    e_pos: &[f64],
    e_negs: &[&[f64]],
    scale: &SimilarityScale,
) -> Result<(f64, Vec<f64>)> {
    if e_negs.is_empty() {
        return Err(GrcError::InvalidInput(
            "contrastive loss needs at least two candidates (M ≥ 2)".into(),
        ));
    }
    let s = scale.scale();
    let mut logits = Vec::with_capacity(1 + e_negs.len());
    logits.push(s * dot(e_q, e_pos));
    for neg in e_negs {
        logits.push(s * dot(e_q, neg));
    }
    // −log softmax_pos anchored at the positive logit:
    // ln(1 + Σ_{d≠pos} e^{z_d − z_pos}) stays exact even when the loss is
    // far below f64 resolution relative to the logits themselves.
    let others: f64 = logits[1..].iter().map(|&z| (z - logits[0]).exp()).sum();
    Ok((others.ln_1p(), logits))
}

/// Backward of [`loss_rep`]: gradients on the unit embeddings.
fn loss_rep_grads(
    e_q: &[f64],
    e_pos: &[f64],
    e_negs: &[&[f64]],
    scale: &SimilarityScale,
    weight: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> {
    let (loss, logits) = rep_logits(e_q, e_pos, e_negs, scale)?;
    let s = scale.scale();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
    let probs: Vec<f64> = logits.iter().map(|&v| (v - max).exp() / denom).collect();
    let dim = e_q.len();
    let mut d_q = vec![0.0; dim];
    let mut d_pos = vec![0.0; dim];
    let mut d_negs = vec![vec![0.0; dim]; e_negs.len()];
    let dz0 = weight * (probs[0] - 1.0);
    for t in 0..dim {
        d_q[t] += dz0 * s * e_pos[t];
        d_pos[t] += dz0 * s * e_q[t];
    }
    for (j, neg) in e_negs.iter().enumerate() {
        let dz = weight * probs[j + 1];
        for t in 0..dim {
            d_q[t] += dz * s * neg[t];
            d_negs[j][t] += dz * s * e_q[t];
        }
    }
    Ok((loss, d_q, d_pos, d_negs))
}

/// Per-term breakdown; `total = α·gen + β·recons + γ·rep`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub gen: f64,
    pub recons: f64,
    pub rep: f64,
}

struct SeqPass {
    output: ForwardOutput<f64>,
    trace: crate::model::Trace<f64>,
    targets: Vec<u32>,
    embedding: Option<Vec<f64>>,
}

fn run_sequence(
    model: &GrcModel,
    seq: &crate::data::SegmentedSequence,
    need_embedding: bool,
) -> Result<SeqPass> {
    let (embedded, position_ids, mask) = crate::model::splice_latents(
        &model.params,
        &seq.first,
        &model.latents,
        &seq.second,
        &seq.layout,
    )?;
    let input = ForwardInput {
        embedded,
        position_ids,
        mask: &mask,
        past: None,
    };
    let (output, trace) = forward_traced(&model.params, &input)?;
    let mut targets = seq.first.clone();
    targets.extend(std::iter::repeat(crate::tokenizer::PAD).take(seq.layout.m));
    targets.extend_from_slice(&seq.second);
    let embedding = if need_embedding {
        let rows: Vec<&[f64]> = seq
            .layout
            .latent_range()
            .map(|i| output.last_hidden.row(i))
            .collect();
        Some(embed(&Mat::from_rows(&rows), &model.head)?)
    } else {
        None
    };
    Ok(SeqPass {
        output,
        trace,
        targets,
        embedding,
    })
}

/// Combined objective over one unified example. Issues exactly one forward
/// pass per distinct sequence; the generation and reconstruction terms
/// average over all distinct sequences (query, positive, negatives), and
/// one contrastive term couples their embeddings.
pub fn total_loss(
    example: &UnifiedExample,
    model: &GrcModel,
    weights: &LossWeights,
    scale: &SimilarityScale,
) -> Result<LossBreakdown> {
    total_loss_impl(example, model, weights, scale, false).map(|(b, _)| b)
}

/// As [`total_loss`], also returning gradients for every trainable
/// parameter (computed in one backward pass per sequence).
pub fn total_loss_with_grads(
    example: &UnifiedExample,
    model: &GrcModel,
    weights: &LossWeights,
    scale: &SimilarityScale,
) -> Result<(LossBreakdown, GrcGrads)> {
    total_loss_impl(example, model, weights, scale, true)
        .map(|(b, g)| (b, g.expect("grads requested")))
}

fn total_loss_impl(
    example: &UnifiedExample,
    model: &GrcModel,
    weights: &LossWeights,
    scale: &SimilarityScale,
    want_grads: bool,
) -> Result<(LossBreakdown, Option<GrcGrads>)> {
    weights.validate()?;
    let need_embedding = weights.gamma > 0.0;
    // The generative self-positive shares its forward with the query.
    let self_positive = example.pos_seq == example.query_seq;
    let mut seqs: Vec<&crate::data::SegmentedSequence> = vec![&example.query_seq];
    if !self_positive {
        seqs.push(&example.pos_seq);
    }
    seqs.extend(example.neg_seqs.iter());

    let mut passes: Vec<SeqPass> = seqs
        .iter()
        .map(|seq| run_sequence(model, seq, need_embedding))
        .collect::<Result<Vec<_>>>()?;

    let num_seqs = passes.len() as f64;
    let mut gen = 0.0;
    let mut recons = 0.0;
    for (pass, seq) in passes.iter().zip(&seqs) {
        gen += loss_gen(&pass.output, &pass.targets, &seq.response_span)?;
        recons += loss_recons(&pass.output, &seq.layout, &pass.targets)?;
    }
    gen /= num_seqs;
    recons /= num_seqs;

    // Contrastive term over the embeddings.
    let mut rep = 0.0;
    let mut rep_grads: Option<(Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> = None;
    if need_embedding {
        let e_q = passes[0].embedding.as_ref().unwrap().clone();
        let e_pos = if self_positive {
            e_q.clone()
        } else {
            passes[1].embedding.as_ref().unwrap().clone()
        };
        let neg_start = if self_positive { 1 } else { 2 };
        let e_negs: Vec<&[f64]> = passes[neg_start..]
            .iter()
            .map(|p| p.embedding.as_ref().unwrap().as_slice())
            .collect();
        if want_grads {
            let (loss, d_q, d_pos, d_negs) =
                loss_rep_grads(&e_q, &e_pos, &e_negs, scale, weights.gamma)?;
            rep = loss;
            rep_grads = Some((d_q, d_pos, d_negs));
        } else {
            rep = loss_rep(&e_q, &e_pos, &e_negs, scale)?;
        }
    }

    let breakdown = LossBreakdown {
        total: weights.alpha * gen + weights.beta * recons + weights.gamma * rep,
        gen,
        recons,
        rep,
    };
    if !want_grads {
        return Ok((breakdown, None));
    }

    let mut grads = GrcGrads::zeros(model);
    let vocab = model.params.config.vocab_size;
    for (idx, pass) in passes.iter_mut().enumerate() {
        let seq = seqs[idx];
        let n = seq.total_len();
        let mut d_logits = Mat::zeros(n, vocab);
        let mut d_hidden = Mat::zeros(n, model.params.config.hidden_dim);
        if weights.alpha > 0.0 {
            span_nll_grad(
                &pass.output.logits,
                &pass.targets,
                &seq.response_span,
                weights.alpha / num_seqs,
                &mut d_logits,
            );
        }
        if weights.beta > 0.0 {
            span_nll_grad(
                &pass.output.logits,
                &pass.targets,
                &seq.layout.recon_range(),
                weights.beta / num_seqs,
                &mut d_logits,
            );
        }
        if let Some((d_q, d_pos, d_negs)) = &rep_grads {
            // Gradient on this sequence's embedding: the query also serves
            // as the positive for self-positive examples.
            let mut d_e = vec![0.0; model.head.embed_dim()];
            let mut add = |src: &[f64]| {
                for (a, &b) in d_e.iter_mut().zip(src) {
                    *a += b;
                }
            };
            if idx == 0 {
                add(d_q);
                if self_positive {
                    add(d_pos);
                }
            } else if !self_positive && idx == 1 {
                add(d_pos);
            }
            let neg_start = if self_positive { 1 } else { 2 };
            if idx >= neg_start {
                add(&d_negs[idx - neg_start]);
            }
            let rows: Vec<&[f64]> = seq
                .layout
                .latent_range()
                .map(|i| pass.output.last_hidden.row(i))
                .collect();
            let latent_hidden = Mat::from_rows(&rows);
            let e = pass.embedding.as_ref().unwrap();
            let d_latent_hidden = embed_backward(
                &latent_hidden,
                &model.head,
                e,
                &d_e,
                &mut grads.head_weight,
                &mut grads.head_bias,
            );
            for (row, i) in seq.layout.latent_range().enumerate() {
                for (t, &v) in d_latent_hidden.row(row).iter().enumerate() {
                    let cur = d_hidden.get(i, t);
                    d_hidden.set(i, t, cur + v);
                }
            }
        }
        let (param_grads, input_grads) =
            backward(&model.params, &pass.trace, &d_logits, &d_hidden)?;
        grads.params.accumulate(&param_grads);
        // Scatter input grads: token rows into the embedding grad, latent
        // rows into the bank grad.
        for i in 0..seq.layout.k {
            let id = seq.first[i] as usize;
            axpy_row(grads.params.embedding.row_mut(id), input_grads.embedded.row(i));
        }
        for (row, i) in seq.layout.latent_range().enumerate() {
            axpy_row(grads.latents.row_mut(row), input_grads.embedded.row(i));
        }
        for (off, i) in seq.layout.second_segment_range().enumerate() {
            let id = seq.second[off] as usize;
            axpy_row(grads.params.embedding.row_mut(id), input_grads.embedded.row(i));
        }
    }
    Ok((breakdown, Some(grads)))
}

fn axpy_row(dst: &mut [f64], src: &[f64]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}
