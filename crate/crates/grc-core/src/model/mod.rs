//! Minimal deterministic decoder-only transformer.
//!
//! Pre-norm blocks with grouped-query attention, rotary position
//! embeddings and a SwiGLU MLP. The forward pass accepts arbitrary
//! boolean attention masks, spliced latent-vector inputs, injected past
//! KV and explicit position ids, so one code path serves generation,
//! compression and embedding.

mod backprop;
mod forward;
mod init;

pub use backprop::{backward, InputGrads, LayerGrads, ParamGrads};
pub use forward::{forward, forward_traced, ForwardInput, ForwardOutput, LayerKv, PastKv, Trace};
pub(crate) use forward::{rmsnorm_rows, rope_in_place, silu};
pub use init::gaussian_stream;

/// 64-bit content digest used for model fingerprints and block hashes.
pub fn fingerprint_digest(bytes: &[u8]) -> u64 {
    init::fnv1a64(bytes)
}

use crate::error::{GrcError, Result};
use crate::linalg::{Mat, Scalar};
use crate::mask::{build_grc_mask, AttentionMask, SegmentLayout};
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

/// RMSNorm epsilon shared by the f64 and f32 paths.
pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_q_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub rope_base: f64,
    /// Bytes per stored KV element, used by the cache size calculator.
    pub elem_bytes: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale default: small enough for exhaustive oracles.
    pub fn toy() -> Self {
        ModelConfig {
            num_layers: 2,
            hidden_dim: 64,
            num_q_heads: 4,
            num_kv_heads: 2,
            head_dim: 16,
            vocab_size: 512,
            rope_base: 10_000.0,
            elem_bytes: 4,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0
            || self.hidden_dim == 0
            || self.num_q_heads == 0
            || self.num_kv_heads == 0
            || self.head_dim == 0
            || self.vocab_size == 0
        {
            return Err(GrcError::InvalidConfig("zero dimension".into()));
        }
        if self.num_q_heads % self.num_kv_heads != 0 {
            return Err(GrcError::InvalidConfig(format!(
                "num_q_heads {} must be a positive multiple of num_kv_heads {}",
                self.num_q_heads, self.num_kv_heads
            )));
        }
        if self.hidden_dim != self.num_q_heads * self.head_dim {
            return Err(GrcError::InvalidConfig(format!(
                "hidden_dim {} must equal num_q_heads × head_dim = {}",
                self.hidden_dim,
                self.num_q_heads * self.head_dim
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(GrcError::InvalidConfig(
                "head_dim must be even for rotary embedding".into(),
            ));
        }
        if !(self.rope_base > 0.0) {
            return Err(GrcError::InvalidConfig("rope_base must be positive".into()));
        }
        Ok(())
    }

    /// Query projection width (`= hidden_dim` by the config invariant).
    pub fn q_dim(&self) -> usize {
        self.num_q_heads * self.head_dim
    }

    /// Key/value projection width.
    pub fn kv_dim(&self) -> usize {
        self.num_kv_heads * self.head_dim
    }

    /// MLP inner width, fixed at 4× the hidden width.
    pub fn mlp_dim(&self) -> usize {
        4 * self.hidden_dim
    }

    /// Queries per KV head.
    pub fn group_size(&self) -> usize {
        self.num_q_heads / self.num_kv_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<S = f64> {
    pub attn_norm: Vec<S>,
    pub wq: Mat<S>,
    pub wk: Mat<S>,
    pub wv: Mat<S>,
    pub wo: Mat<S>,
    pub mlp_norm: Vec<S>,
    pub w_gate: Mat<S>,
    pub w_up: Mat<S>,
    pub w_down: Mat<S>,
}

/// Transformer weights. Immutable during inference and freely shareable
/// across threads; `forward` only bumps the pass counter.
#[derive(Debug)]
pub struct ModelParameters<S = f64> {
    pub config: ModelConfig,
    /// `vocab_size × hidden_dim`
    pub embedding: Mat<S>,
    pub layers: Vec<LayerParams<S>>,
    pub final_norm: Vec<S>,
    /// `hidden_dim × vocab_size`
    pub lm_head: Mat<S>,
    /// Instrumentation: counts completed forward passes.
    pub passes: AtomicU64,
}

impl<S: Scalar> Clone for ModelParameters<S> {
    fn clone(&self) -> Self {
        ModelParameters {
            config: self.config,
            embedding: self.embedding.clone(),
            layers: self.layers.clone(),
            final_norm: self.final_norm.clone(),
            lm_head: self.lm_head.clone(),
            passes: AtomicU64::new(0),
        }
    }
}

impl<S: Scalar> ModelParameters<S> {
    pub fn pass_count(&self) -> u64 {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn reset_pass_count(&self) {
        self.passes.store(0, Ordering::Relaxed);
    }

    /// Total scalar parameter count; a pure function of the config.
    pub fn param_count(config: &ModelConfig) -> usize {
        let d = config.hidden_dim;
        let per_layer = d // attn_norm
            + d * config.q_dim()
            + 2 * d * config.kv_dim()
            + config.q_dim() * d
            + d // mlp_norm
            + 2 * d * config.mlp_dim()
            + config.mlp_dim() * d;
        config.vocab_size * d + config.num_layers * per_layer + d + d * config.vocab_size
    }

    pub fn to_f32(&self) -> ModelParameters<f32>
    where
        S: Scalar,
    {
        ModelParameters {
            config: self.config,
            embedding: self.embedding.map_to(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: l.attn_norm.iter().map(|v| v.as_f64() as f32).collect(),
                    wq: l.wq.map_to(),
                    wk: l.wk.map_to(),
                    wv: l.wv.map_to(),
                    wo: l.wo.map_to(),
                    mlp_norm: l.mlp_norm.iter().map(|v| v.as_f64() as f32).collect(),
                    w_gate: l.w_gate.map_to(),
                    w_up: l.w_up.map_to(),
                    w_down: l.w_down.map_to(),
                })
                .collect(),
            final_norm: self.final_norm.iter().map(|v| v.as_f64() as f32).collect(),
            lm_head: self.lm_head.map_to(),
            passes: AtomicU64::new(0),
        }
    }
}

/// The `m` trainable meta-latent vectors, kept outside the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBank {
    /// `m × hidden_dim`
    pub vectors: Mat<f64>,
}

impl LatentBank {
    pub fn init(m: usize, hidden_dim: usize, seed: u64) -> Self {
        let mut data = Vec::with_capacity(m * hidden_dim);
        let mut stream = gaussian_stream(seed, "latent_bank");
        for _ in 0..m * hidden_dim {
            data.push(stream.next_scaled());
        }
        LatentBank {
            vectors: Mat::from_vec(m, hidden_dim, data),
        }
    }

    pub fn m(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

/// Initialize all weight matrices from the named counter-based generator.
/// Identical `(config, seed)` always yields bitwise-identical parameters.
pub fn init_model(config: &ModelConfig) -> Result<ModelParameters> {
    config.validate()?;
    let seed = config.seed;
    let gauss_mat = |name: &str, rows: usize, cols: usize| -> Mat<f64> {
        let mut stream = gaussian_stream(seed, name);
        let data = (0..rows * cols).map(|_| stream.next_scaled()).collect();
        Mat::from_vec(rows, cols, data)
    };
    let d = config.hidden_dim;
    let layers = (0..config.num_layers)
        .map(|l| LayerParams {
            attn_norm: vec![1.0; d],
            wq: gauss_mat(&format!("layer{l}.wq"), d, config.q_dim()),
            wk: gauss_mat(&format!("layer{l}.wk"), d, config.kv_dim()),
            wv: gauss_mat(&format!("layer{l}.wv"), d, config.kv_dim()),
            wo: gauss_mat(&format!("layer{l}.wo"), config.q_dim(), d),
            mlp_norm: vec![1.0; d],
            w_gate: gauss_mat(&format!("layer{l}.w_gate"), d, config.mlp_dim()),
            w_up: gauss_mat(&format!("layer{l}.w_up"), d, config.mlp_dim()),
            w_down: gauss_mat(&format!("layer{l}.w_down"), config.mlp_dim(), d),
        })
        .collect();
    Ok(ModelParameters {
        config: *config,
        embedding: gauss_mat("embedding", config.vocab_size, d),
        layers,
        final_norm: vec![1.0; d],
        lm_head: gauss_mat("lm_head", d, config.vocab_size),
        passes: AtomicU64::new(0),
    })
}

/// Splice latent vectors between token-embedding segments per the layout:
/// segment-① embeddings, then the `m` latent vectors verbatim (no
/// vocabulary lookup), then segment-④ embeddings, with contiguous
/// position ids and the reconstruction mask for the layout.
pub fn splice_latents(
    params: &ModelParameters,
    first_tokens: &[u32],
    latents: &LatentBank,
    second_tokens: &[u32],
    layout: &SegmentLayout,
) -> Result<(Mat<f64>, Vec<usize>, AttentionMask)> {
    layout.validate()?;
    if layout.m != latents.m() {
        return Err(GrcError::ShapeMismatch(format!(
            "layout.m {} != latent bank m {}",
            layout.m,
            latents.m()
        )));
    }
    if layout.k != first_tokens.len() || layout.t != second_tokens.len() {
        return Err(GrcError::ShapeMismatch(format!(
            "layout (k={}, t={}) does not match token counts ({}, {})",
            layout.k,
            layout.t,
            first_tokens.len(),
            second_tokens.len()
        )));
    }
    let d = params.config.hidden_dim;
    let n = layout.total_len();
    let mut embedded = Mat::zeros(n, d);
    let mut lookup = |pos: usize, id: u32| -> Result<()> {
        let id = id as usize;
        if id >= params.config.vocab_size {
            return Err(GrcError::InvalidInput(format!(
                "token id {id} out of vocab {}",
                params.config.vocab_size
            )));
        }
        embedded.row_mut(pos).copy_from_slice(params.embedding.row(id));
        Ok(())
    };
    for (i, &id) in first_tokens.iter().enumerate() {
        lookup(i, id)?;
    }
    for (i, &id) in second_tokens.iter().enumerate() {
        lookup(layout.k + layout.m + i, id)?;
    }
    for i in 0..layout.m {
        embedded
            .row_mut(layout.k + i)
            .copy_from_slice(latents.vectors.row(i));
    }
    let position_ids = (0..n).collect();
    Ok((embedded, position_ids, build_grc_mask(layout)))
}

/// Embed a plain token sequence (no latents).
pub fn embed_tokens(params: &ModelParameters, tokens: &[u32]) -> Result<Mat<f64>> {
    let d = params.config.hidden_dim;
    let mut out = Mat::zeros(tokens.len(), d);
    for (i, &id) in tokens.iter().enumerate() {
        let id = id as usize;
        if id >= params.config.vocab_size {
            return Err(GrcError::InvalidInput(format!(
                "token id {id} out of vocab {}",
                params.config.vocab_size
            )));
        }
        out.row_mut(i).copy_from_slice(params.embedding.row(id));
    }
    Ok(out)
}
