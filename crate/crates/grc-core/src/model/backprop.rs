//! Hand-derived reverse pass over the traced forward. Correctness is owned
//! by the finite-difference gradient checks in the objectives module.

use super::forward::Trace;
use super::{LayerParams, ModelParameters};
use crate::error::{GrcError, Result};
use crate::linalg::{dot, Mat};

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub attn_norm: Vec<f64>,
    pub wq: Mat<f64>,
    pub wk: Mat<f64>,
    pub wv: Mat<f64>,
    pub wo: Mat<f64>,
    pub mlp_norm: Vec<f64>,
    pub w_gate: Mat<f64>,
    pub w_up: Mat<f64>,
    pub w_down: Mat<f64>,
}

#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub embedding: Mat<f64>,
    pub layers: Vec<LayerGrads>,
    pub final_norm: Vec<f64>,
    pub lm_head: Mat<f64>,
}

impl ParamGrads {
    pub fn zeros(params: &ModelParameters<f64>) -> Self {
        let c = &params.config;
        ParamGrads {
            embedding: Mat::zeros(c.vocab_size, c.hidden_dim),
            layers: (0..c.num_layers)
                .map(|_| LayerGrads {
                    attn_norm: vec![0.0; c.hidden_dim],
                    wq: Mat::zeros(c.hidden_dim, c.q_dim()),
                    wk: Mat::zeros(c.hidden_dim, c.kv_dim()),
                    wv: Mat::zeros(c.hidden_dim, c.kv_dim()),
                    wo: Mat::zeros(c.q_dim(), c.hidden_dim),
                    mlp_norm: vec![0.0; c.hidden_dim],
                    w_gate: Mat::zeros(c.hidden_dim, c.mlp_dim()),
                    w_up: Mat::zeros(c.hidden_dim, c.mlp_dim()),
                    w_down: Mat::zeros(c.mlp_dim(), c.hidden_dim),
                })
                .collect(),
            final_norm: vec![0.0; c.hidden_dim],
            lm_head: Mat::zeros(c.hidden_dim, c.vocab_size),
        }
    }

    pub fn accumulate(&mut self, other: &ParamGrads) {
        self.embedding.add_assign(&other.embedding);
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            add_vec(&mut a.attn_norm, &b.attn_norm);
            a.wq.add_assign(&b.wq);
            a.wk.add_assign(&b.wk);
            a.wv.add_assign(&b.wv);
            a.wo.add_assign(&b.wo);
            add_vec(&mut a.mlp_norm, &b.mlp_norm);
            a.w_gate.add_assign(&b.w_gate);
            a.w_up.add_assign(&b.w_up);
            a.w_down.add_assign(&b.w_down);
        }
        add_vec(&mut self.final_norm, &other.final_norm);
        self.lm_head.add_assign(&other.lm_head);
    }
}

fn add_vec(a: &mut [f64], b: &[f64]) {
    for (x, &y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Gradient with respect to the spliced input rows; the caller scatters
/// token rows into the embedding grad and latent rows into the bank grad.
#[derive(Debug)]
pub struct InputGrads {
    pub embedded: Mat<f64>,
}

/// `y = x·g/rms(x)` backward for a whole matrix of rows.
fn rmsnorm_backward(
    x: &Mat<f64>,
    gain: &[f64],
    inv_rms: &[f64],
    dy: &Mat<f64>,
    dgain: &mut [f64],
) -> Mat<f64> {
    let d = x.cols() as f64;
    let mut dx = Mat::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let inv = inv_rms[i];
        let x_row = x.row(i);
        let dy_row = dy.row(i);
        let mut s = 0.0;
        for j in 0..x.cols() {
            s += dy_row[j] * gain[j] * x_row[j];
            dgain[j] += dy_row[j] * x_row[j] * inv;
        }
        let coef = s * inv * inv * inv / d;
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = dy_row[j] * gain[j] * inv - x_row[j] * coef;
        }
    }
    dx
}

/// Inverse rotation (rotate by `-θ`).
fn rope_backward_in_place(row: &mut [f64], d_h: usize, pos: usize, base: f64) {
    for head in row.chunks_mut(d_h) {
        for i in 0..d_h / 2 {
            let theta = pos as f64 * base.powf(-2.0 * i as f64 / d_h as f64);
            let (sin, cos) = theta.sin_cos();
            let a = head[2 * i];
            let b = head[2 * i + 1];
            head[2 * i] = a * cos + b * sin;
            head[2 * i + 1] = -a * sin + b * cos;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Reverse pass. `d_logits` and `d_last_hidden` are the loss gradients on
/// the two forward outputs (either may be all zeros).
pub fn backward(
    params: &ModelParameters<f64>,
    trace: &Trace<f64>,
    d_logits: &Mat<f64>,
    d_last_hidden: &Mat<f64>,
) -> Result<(ParamGrads, InputGrads)> {
    let config = &params.config;
    let n = trace.final_normed.rows();
    if d_logits.rows() != n || d_last_hidden.rows() != n {
        return Err(GrcError::ShapeMismatch(
            "output grad row count != sequence length".into(),
        ));
    }
    let mut grads = ParamGrads::zeros(params);
    let d_h = config.head_dim;
    let group = config.group_size();
    let scale = 1.0 / (d_h as f64).sqrt();

    // logits = F · lm_head
    grads.lm_head = trace.final_normed.matmul_tn(d_logits);
    let mut d_final = d_logits.matmul_nt(&params.lm_head);
    d_final.add_assign(d_last_hidden);

    // F = rmsnorm(x_final_in)
    let mut dx = rmsnorm_backward(
        &trace.x_final_in,
        &params.final_norm,
        &trace.inv_rms_final,
        &d_final,
        &mut grads.final_norm,
    );

    for (l, layer) in params.layers.iter().enumerate().rev() {
        let tr = &trace.layers[l];
        let lg = &mut grads.layers[l];
        dx = layer_backward(config, layer, tr, lg, &dx, trace, group, scale);
    }

    Ok((grads, InputGrads { embedded: dx }))
}

#[allow(clippy::too_many_arguments)]
fn layer_backward(
    config: &super::ModelConfig,
    layer: &LayerParams<f64>,
    tr: &super::forward::LayerTrace<f64>,
    lg: &mut LayerGrads,
    dx_next: &Mat<f64>,
    trace: &Trace<f64>,
    group: usize,
    scale: f64,
) -> Mat<f64> {
    let n = dx_next.rows();
    let d_h = config.head_dim;

    // x_next = x_mid + mlp_act·w_down
    let d_z = dx_next; // grad into the MLP output
    let d_act = d_z.matmul_nt(&layer.w_down);
    lg.w_down = tr.mlp_act.matmul_tn(d_z);

    // act = silu(gate) ⊙ up
    let mut d_gate = Mat::zeros(n, config.mlp_dim());
    let mut d_up = Mat::zeros(n, config.mlp_dim());
    for i in 0..n {
        let g_row = tr.gate.row(i);
        let u_row = tr.up.row(i);
        let da_row = d_act.row(i);
        let dg_row = d_gate.row_mut(i);
        for j in 0..config.mlp_dim() {
            let sg = sigmoid(g_row[j]);
            let silu_g = g_row[j] * sg;
            dg_row[j] = da_row[j] * u_row[j] * sg * (1.0 + g_row[j] * (1.0 - sg));
            d_up.set(i, j, da_row[j] * silu_g);
        }
    }
    let mut d_normed_mlp = d_gate.matmul_nt(&layer.w_gate);
    d_normed_mlp.add_assign(&d_up.matmul_nt(&layer.w_up));
    lg.w_gate = tr.normed_mlp.matmul_tn(&d_gate);
    lg.w_up = tr.normed_mlp.matmul_tn(&d_up);

    // x_mid gets the residual grad plus the norm path.
    let mut d_x_mid = dx_next.clone();
    d_x_mid.add_assign(&rmsnorm_backward(
        &tr.x_mid,
        &layer.mlp_norm,
        &tr.inv_rms_mlp,
        &d_normed_mlp,
        &mut lg.mlp_norm,
    ));

    // x_mid = x_in + attn_concat·wo
    let d_attn_concat = d_x_mid.matmul_nt(&layer.wo);
    lg.wo = tr.attn_concat.matmul_tn(&d_x_mid);

    // Attention backward per query head over the masked pairs.
    let mut d_q_rot = Mat::zeros(n, config.q_dim());
    let mut d_k_rot = Mat::zeros(n, config.kv_dim());
    let mut d_v = Mat::zeros(n, config.kv_dim());
    let mut dp: Vec<f64> = Vec::new();
    for h in 0..config.num_q_heads {
        let kv_off = (h / group) * d_h;
        let probs = &tr.probs[h];
        for i in 0..n {
            let row_start = trace.row_starts[i];
            let d_o = &d_attn_concat.row(i)[h * d_h..(h + 1) * d_h];
            let p_row = probs.row(i);
            dp.clear();
            let mut weighted = 0.0;
            for j in row_start..=i {
                let g = dot(d_o, &tr.v.row(j)[kv_off..kv_off + d_h]);
                weighted += g * p_row[j];
                dp.push(g);
            }
            let q_head = &tr.q_rot.row(i)[h * d_h..(h + 1) * d_h];
            let dq_head = &mut d_q_rot.row_mut(i)[h * d_h..(h + 1) * d_h];
            for (idx, j) in (row_start..=i).enumerate() {
                let p = p_row[j];
                let ds = p * (dp[idx] - weighted) * scale;
                let k_head = &tr.k_rot.row(j)[kv_off..kv_off + d_h];
                for (dq, &kv) in dq_head.iter_mut().zip(k_head) {
                    *dq += ds * kv;
                }
                let dk_head = &mut d_k_rot.row_mut(j)[kv_off..kv_off + d_h];
                for (dk, &qv) in dk_head.iter_mut().zip(q_head) {
                    *dk += ds * qv;
                }
                let dv_head = &mut d_v.row_mut(j)[kv_off..kv_off + d_h];
                for (dv, &ov) in dv_head.iter_mut().zip(d_o) {
                    *dv += p * ov;
                }
            }
        }
    }

    // Undo RoPE on the q/k grads.
    for i in 0..n {
        let pos = trace.position_ids[i];
        rope_backward_in_place(d_q_rot.row_mut(i), d_h, pos, config.rope_base);
        rope_backward_in_place(d_k_rot.row_mut(i), d_h, pos, config.rope_base);
    }

    // Projections from the normed input.
    let mut d_normed = d_q_rot.matmul_nt(&layer.wq);
    d_normed.add_assign(&d_k_rot.matmul_nt(&layer.wk));
    d_normed.add_assign(&d_v.matmul_nt(&layer.wv));
    lg.wq = tr.normed_attn.matmul_tn(&d_q_rot);
    lg.wk = tr.normed_attn.matmul_tn(&d_k_rot);
    lg.wv = tr.normed_attn.matmul_tn(&d_v);

    // x_in gets the residual grad plus the norm path.
    let mut d_x_in = d_x_mid;
    d_x_in.add_assign(&rmsnorm_backward(
        &tr.x_in,
        &layer.attn_norm,
        &tr.inv_rms_attn,
        &d_normed,
        &mut lg.attn_norm,
    ));
    d_x_in
}
