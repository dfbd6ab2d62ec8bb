//! Forward pass: pre-norm GQA attention with RoPE, SwiGLU MLP, arbitrary
//! boolean masks and injected past KV.
//!
//! One generic implementation serves the f64 training/oracle path and the
//! f32 serving path. When a [`Trace`] is supplied the intermediates needed
//! by backprop are recorded; the math is identical either way.

use super::{ModelConfig, ModelParameters, NORM_EPS};
use crate::error::{GrcError, Result};
use crate::linalg::{dot, Mat, Scalar};
use crate::mask::AttentionMask;
use std::sync::atomic::Ordering;

/// Cached K/V rows for one layer. `k` rows are stored post-RoPE.
#[derive(Debug, Clone)]
pub struct LayerKv<S = f64> {
    /// `rows × kv_dim`
    pub k: Mat<S>,
    /// `rows × kv_dim`
    pub v: Mat<S>,
}

/// Previously computed KV with its own position ids.
#[derive(Debug, Clone)]
pub struct PastKv<S = f64> {
    pub layers: Vec<LayerKv<S>>,
    pub position_ids: Vec<usize>,
}

impl<S: Scalar> PastKv<S> {
    pub fn empty(num_layers: usize, kv_dim: usize) -> Self {
        PastKv {
            layers: (0..num_layers)
                .map(|_| LayerKv {
                    k: Mat::zeros(0, kv_dim),
                    v: Mat::zeros(0, kv_dim),
                })
                .collect(),
            position_ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.position_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position_ids.is_empty()
    }

    /// Append another chunk of KV rows (e.g. after an incremental step).
    pub fn append(&mut self, new_kv: &[LayerKv<S>], position_ids: &[usize]) {
        for (layer, add) in self.layers.iter_mut().zip(new_kv) {
            layer.k.append_rows(&add.k);
            layer.v.append_rows(&add.v);
        }
        self.position_ids.extend_from_slice(position_ids);
    }
}


pub struct ForwardInput<'a, S = f64> {
    /// `n_new × hidden_dim`: token embeddings with latent vectors spliced in.
    pub embedded: Mat<S>,
    pub position_ids: Vec<usize>,
    pub mask: &'a AttentionMask,
    pub past: Option<&'a PastKv<S>>,
}

pub struct ForwardOutput<S = f64> {
    /// Post-final-norm hidden states, `n_new × hidden_dim`.
    pub last_hidden: Mat<S>,
    /// `n_new × vocab_size`
    pub logits: Mat<S>,
    /// Exactly one K and one V row per new position per layer.
    pub new_kv: Vec<LayerKv<S>>,
}

/// Intermediates recorded for backprop.
pub struct Trace<S = f64> {
    pub(crate) position_ids: Vec<usize>,
    pub(crate) row_starts: Vec<usize>,
    pub(crate) layers: Vec<LayerTrace<S>>,
    pub(crate) x_final_in: Mat<S>,
    pub(crate) inv_rms_final: Vec<S>,
    pub(crate) final_normed: Mat<S>,
}

pub(crate) struct LayerTrace<S> {
    pub x_in: Mat<S>,
    pub inv_rms_attn: Vec<S>,
    pub normed_attn: Mat<S>,
    pub q_rot: Mat<S>,
    pub k_rot: Mat<S>,
    pub v: Mat<S>,
    /// Per query head: `n × n` attention probabilities (zero at masked pairs).
    pub probs: Vec<Mat<S>>,
    pub attn_concat: Mat<S>,
    pub x_mid: Mat<S>,
    pub inv_rms_mlp: Vec<S>,
    pub normed_mlp: Mat<S>,
    pub gate: Mat<S>,
    pub up: Mat<S>,
    pub mlp_act: Mat<S>,
}

pub(crate) fn rmsnorm_rows<S: Scalar>(x: &Mat<S>, gain: &[S]) -> (Mat<S>, Vec<S>) {
    let mut out = Mat::zeros(x.rows(), x.cols());
    let mut inv_rms = Vec::with_capacity(x.rows());
    let d = S::of(x.cols() as f64);
    let eps = S::of(NORM_EPS);
    for i in 0..x.rows() {
        let row = x.row(i);
        let ms = dot(row, row) / d + eps;
        let inv = S::one() / ms.sqrt();
        inv_rms.push(inv);
        for ((o, &v), &g) in out.row_mut(i).iter_mut().zip(row).zip(gain) {
            *o = v * g * inv;
        }
    }
    (out, inv_rms)
}

/// Rotate adjacent pairs within each head: for pair `i`,
/// `θ = pos · base^(-2i/d_h)`.
pub(crate) fn rope_in_place<S: Scalar>(row: &mut [S], d_h: usize, pos: usize, base: f64) {
    for head in row.chunks_mut(d_h) {
        for i in 0..d_h / 2 {
            let theta = pos as f64 * base.powf(-2.0 * i as f64 / d_h as f64);
            let (sin, cos) = theta.sin_cos();
            let (sin, cos) = (S::of(sin), S::of(cos));
            let a = head[2 * i];
            let b = head[2 * i + 1];
            head[2 * i] = a * cos - b * sin;
            head[2 * i + 1] = a * sin + b * cos;
        }
    }
}

pub(crate) fn silu<S: Scalar>(x: S) -> S {
    x / (S::one() + (-x).exp())
}

fn validate<S: Scalar>(config: &ModelConfig, input: &ForwardInput<S>) -> Result<()> {
    let n = input.embedded.rows();
    if input.position_ids.len() != n || input.mask.n() != n {
        return Err(GrcError::ShapeMismatch(format!(
            "embedded rows {n}, position_ids {}, mask n {}",
            input.position_ids.len(),
            input.mask.n()
        )));
    }
    if input.embedded.cols() != config.hidden_dim {
        return Err(GrcError::ShapeMismatch(format!(
            "embedded cols {} != hidden_dim {}",
            input.embedded.cols(),
            config.hidden_dim
        )));
    }
    for w in input.position_ids.windows(2) {
        if w[1] <= w[0] {
            return Err(GrcError::InvalidInput(
                "position_ids must be strictly increasing".into(),
            ));
        }
    }
    if let Some(past) = input.past {
        if past.layers.len() != config.num_layers {
            return Err(GrcError::ShapeMismatch(format!(
                "past has {} layers, model has {}",
                past.layers.len(),
                config.num_layers
            )));
        }
        for layer in &past.layers {
            if layer.k.rows() != past.len() || layer.v.rows() != past.len() {
                return Err(GrcError::ShapeMismatch(
                    "past kv row count != past position count".into(),
                ));
            }
            if layer.k.cols() != config.kv_dim() {
                return Err(GrcError::ShapeMismatch("past kv width mismatch".into()));
            }
        }
        if let (Some(&past_max), Some(&new_min)) =
            (past.position_ids.iter().max(), input.position_ids.first())
        {
            if new_min <= past_max {
                return Err(GrcError::InvalidInput(format!(
                    "new position id {new_min} collides with or precedes past position {past_max}"
                )));
            }
        }
    }
    Ok(())
}

/// Forward pass over the new positions. Attention at row `i` is a softmax
/// over exactly the columns the mask allows; past KV columns are always
/// allowed.
pub fn forward<S: Scalar>(
    params: &ModelParameters<S>,
    input: &ForwardInput<S>,
) -> Result<ForwardOutput<S>> {
    forward_impl(params, input, None)
}

/// Forward pass that also records the intermediates backprop needs.
/// Only valid without past KV (training runs over full sequences).
pub fn forward_traced(
    params: &ModelParameters<f64>,
    input: &ForwardInput<'_, f64>,
) -> Result<(ForwardOutput<f64>, Trace<f64>)> {
    if input.past.map_or(false, |p| !p.is_empty()) {
        return Err(GrcError::InvalidInput(
            "traced forward does not support past KV".into(),
        ));
    }
    let mut trace = Trace {
        position_ids: input.position_ids.clone(),
        row_starts: (0..input.mask.n()).map(|i| input.mask.row_start(i)).collect(),
        layers: Vec::with_capacity(params.config.num_layers),
        x_final_in: Mat::zeros(0, 0),
        inv_rms_final: Vec::new(),
        final_normed: Mat::zeros(0, 0),
    };
    let out = forward_impl(params, input, Some(&mut trace))?;
    Ok((out, trace))
}

fn forward_impl<S: Scalar>(
    params: &ModelParameters<S>,
    input: &ForwardInput<S>,
    mut trace: Option<&mut Trace<S>>,
) -> Result<ForwardOutput<S>> {
    let config = &params.config;
    validate(config, input)?;
    let n = input.embedded.rows();
    let d_h = config.head_dim;
    let group = config.group_size();
    let past_len = input.past.map_or(0, |p| p.len());
    let scale = S::of(1.0 / (d_h as f64).sqrt());

    let mut x = input.embedded.clone();
    let mut new_kv = Vec::with_capacity(config.num_layers);
    let mut scores: Vec<S> = Vec::new();

    for (l, layer) in params.layers.iter().enumerate() {
        let (normed, inv_rms_attn) = rmsnorm_rows(&x, &layer.attn_norm);
        let mut q = normed.matmul(&layer.wq);
        let mut k = normed.matmul(&layer.wk);
        let v = normed.matmul(&layer.wv);
        for i in 0..n {
            let pos = input.position_ids[i];
            rope_in_place(q.row_mut(i), d_h, pos, config.rope_base);
            rope_in_place(k.row_mut(i), d_h, pos, config.rope_base);
        }

        let mut probs_trace: Vec<Mat<S>> = if trace.is_some() {
            (0..config.num_q_heads)
                .map(|_| Mat::zeros(n, past_len + n))
                .collect()
        } else {
            Vec::new()
        };

        let past_layer = input.past.map(|p| &p.layers[l]);
        let mut attn_concat = Mat::zeros(n, config.q_dim());
        for i in 0..n {
            let row_start = input.mask.row_start(i);
            for h in 0..config.num_q_heads {
                let kv_h = h / group;
                let kv_off = kv_h * d_h;
                let q_head = &q.row(i)[h * d_h..(h + 1) * d_h];

                // Two-pass softmax over past columns plus allowed new columns.
                scores.clear();
                let mut max = S::of(f64::NEG_INFINITY);
                if let Some(past) = past_layer {
                    for j in 0..past_len {
                        let s = dot(q_head, &past.k.row(j)[kv_off..kv_off + d_h]) * scale;
                        if s > max {
                            max = s;
                        }
                        scores.push(s);
                    }
                }
                for j in row_start..=i {
                    let s = dot(q_head, &k.row(j)[kv_off..kv_off + d_h]) * scale;
                    if s > max {
                        max = s;
                    }
                    scores.push(s);
                }
                let mut denom = S::zero();
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    denom = denom + *s;
                }
                let out_head = &mut attn_concat.row_mut(i)[h * d_h..(h + 1) * d_h];
                let mut idx = 0;
                if let Some(past) = past_layer {
                    for j in 0..past_len {
                        let p = scores[idx] / denom;
                        idx += 1;
                        let v_row = &past.v.row(j)[kv_off..kv_off + d_h];
                        for (o, &vv) in out_head.iter_mut().zip(v_row) {
                            *o = *o + p * vv;
                        }
                    }
                }
                for j in row_start..=i {
                    let p = scores[idx] / denom;
                    idx += 1;
                    let v_row = &v.row(j)[kv_off..kv_off + d_h];
                    for (o, &vv) in out_head.iter_mut().zip(v_row) {
                        *o = *o + p * vv;
                    }
                    if let Some(pt) = probs_trace.get_mut(h) {
                        pt.set(i, past_len + j, p);
                    }
                }
            }
        }

        let attn_out = attn_concat.matmul(&layer.wo);
        let mut x_mid = x.clone();
        x_mid.add_assign(&attn_out);

        let (normed_mlp, inv_rms_mlp) = rmsnorm_rows(&x_mid, &layer.mlp_norm);
        let gate = normed_mlp.matmul(&layer.w_gate);
        let up = normed_mlp.matmul(&layer.w_up);
        let mut act = Mat::zeros(n, config.mlp_dim());
        for i in 0..n {
            let g_row = gate.row(i);
            let u_row = up.row(i);
            for (j, a) in act.row_mut(i).iter_mut().enumerate() {
                *a = silu(g_row[j]) * u_row[j];
            }
        }
        let mlp_out = act.matmul(&layer.w_down);
        let mut x_next = x_mid.clone();
        x_next.add_assign(&mlp_out);

        if let Some(t) = trace.as_deref_mut() {
            t.layers.push(LayerTrace {
                x_in: x,
                inv_rms_attn,
                normed_attn: normed,
                q_rot: q,
                k_rot: k.clone(),
                v: v.clone(),
                probs: probs_trace,
                attn_concat,
                x_mid: x_mid.clone(),
                inv_rms_mlp,
                normed_mlp,
                gate,
                up,
                mlp_act: act,
            });
        }
        new_kv.push(LayerKv { k, v });
        x = x_next;
    }

    let (final_normed, inv_rms_final) = rmsnorm_rows(&x, &params.final_norm);
    let logits = final_normed.matmul(&params.lm_head);
    if let Some(t) = trace.as_deref_mut() {
        t.x_final_in = x;
        t.inv_rms_final = inv_rms_final;
        t.final_normed = final_normed.clone();
    }
    params.passes.fetch_add(1, Ordering::Relaxed);
    Ok(ForwardOutput {
        last_hidden: final_normed,
        logits,
        new_kv,
    })
}
