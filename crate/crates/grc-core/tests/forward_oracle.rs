//! Straight-line scalar re-implementation of the forward pass, written
//! directly from the architecture definition (RMSNorm → GQA attention with
//! rotary embeddings → SwiGLU, pre-norm residuals). Everything here is
//! plain nested loops over `Vec<f64>`; it shares no code with the
//! production path it checks.

use grc_core::linalg::Mat;
use grc_core::mask::{build_causal_mask, build_grc_mask, AttentionMask, SegmentLayout};
use grc_core::model::{
    embed_tokens, forward, init_model, splice_latents, ForwardInput, LatentBank, ModelConfig,
    PastKv,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Rows = Vec<Vec<f64>>;

fn oracle_rmsnorm(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let mut ms = 0.0;
    for &v in x {
        ms += v * v;
    }
    ms = ms / x.len() as f64 + 1e-6;
    let r = ms.sqrt();
    (0..x.len()).map(|j| x[j] * gain[j] / r).collect()
}

fn oracle_linear(x: &[f64], w: &Mat<f64>) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (i, &xi) in x.iter().enumerate() {
        for (j, o) in out.iter_mut().enumerate() {
            *o += xi * w.get(i, j);
        }
    }
    out
}

fn oracle_rope(v: &[f64], d_h: usize, pos: usize, base: f64) -> Vec<f64> {
    let mut out = v.to_vec();
    let n_heads = v.len() / d_h;
    for h in 0..n_heads {
        for i in 0..d_h / 2 {
            let theta = pos as f64 / base.powf(2.0 * i as f64 / d_h as f64);
            let a = v[h * d_h + 2 * i];
            let b = v[h * d_h + 2 * i + 1];
            out[h * d_h + 2 * i] = a * theta.cos() - b * theta.sin();
            out[h * d_h + 2 * i + 1] = a * theta.sin() + b * theta.cos();
        }
    }
    out
}

/// Full-model scalar oracle: returns (last_hidden, logits).
fn oracle_forward(
    params: &grc_core::model::ModelParameters,
    embedded: &Rows,
    position_ids: &[usize],
    mask: &AttentionMask,
) -> (Rows, Rows) {
    let cfg = &params.config;
    let n = embedded.len();
    let d_h = cfg.head_dim;
    let mut x = embedded.clone();
    for layer in &params.layers {
        // Attention sublayer.
        let normed: Rows = x.iter().map(|r| oracle_rmsnorm(r, &layer.attn_norm)).collect();
        let q: Rows = normed
            .iter()
            .enumerate()
            .map(|(i, r)| oracle_rope(&oracle_linear(r, &layer.wq), d_h, position_ids[i], cfg.rope_base))
            .collect();
        let k: Rows = normed
            .iter()
            .enumerate()
            .map(|(i, r)| oracle_rope(&oracle_linear(r, &layer.wk), d_h, position_ids[i], cfg.rope_base))
            .collect();
        let v: Rows = normed.iter().map(|r| oracle_linear(r, &layer.wv)).collect();

        let mut attn = vec![vec![0.0; cfg.num_q_heads * d_h]; n];
        for i in 0..n {
            for h in 0..cfg.num_q_heads {
                let kv_h = h / (cfg.num_q_heads / cfg.num_kv_heads);
                let cols: Vec<usize> = (0..n).filter(|&j| mask.allowed(i, j)).collect();
                let mut weights = Vec::new();
                for &j in &cols {
                    let mut s = 0.0;
                    for t in 0..d_h {
                        s += q[i][h * d_h + t] * k[j][kv_h * d_h + t];
                    }
                    weights.push((s / (d_h as f64).sqrt()).exp());
                }
                let denom: f64 = weights.iter().sum();
                for (w, &j) in weights.iter().zip(&cols) {
                    for t in 0..d_h {
                        attn[i][h * d_h + t] += w / denom * v[j][kv_h * d_h + t];
                    }
                }
            }
        }
        for i in 0..n {
            let proj = oracle_linear(&attn[i], &layer.wo);
            for (xv, pv) in x[i].iter_mut().zip(&proj) {
                *xv += pv;
            }
        }

        // MLP sublayer.
        for i in 0..n {
            let normed = oracle_rmsnorm(&x[i], &layer.mlp_norm);
            let gate = oracle_linear(&normed, &layer.w_gate);
            let up = oracle_linear(&normed, &layer.w_up);
            let act: Vec<f64> = gate
                .iter()
                .zip(&up)
                .map(|(&g, &u)| g / (1.0 + (-g).exp()) * u)
                .collect();
            let proj = oracle_linear(&act, &layer.w_down);
            for (xv, pv) in x[i].iter_mut().zip(&proj) {
                *xv += pv;
            }
        }
    }
    let hidden: Rows = x.iter().map(|r| oracle_rmsnorm(r, &params.final_norm)).collect();
    let logits: Rows = hidden.iter().map(|r| oracle_linear(r, &params.lm_head)).collect();
    (hidden, logits)
}

fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        hidden_dim: 16,
        num_q_heads: 4,
        num_kv_heads: 2,
        head_dim: 4,
        vocab_size: 37,
        rope_base: 10_000.0,
        elem_bytes: 4,
        seed,
    }
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Rows {
    (0..n)
        .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

fn to_mat(rows: &Rows) -> Mat<f64> {
    let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    Mat::from_rows(&refs)
}

fn max_abs_diff(a: &Mat<f64>, b: &Rows) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..a.rows() {
        for (j, &bv) in b[i].iter().enumerate() {
            worst = worst.max((a.get(i, j) - bv).abs());
        }
    }
    worst
}

#[test]
fn forward_matches_scalar_oracle_under_random_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..6 {
        let config = tiny_config(100 + case);
        let params = init_model(&config).unwrap();
        let k = rng.gen_range(1..6);
        let m = rng.gen_range(0..4);
        let t = rng.gen_range(0..5usize);
        let layout = SegmentLayout {
            k,
            m,
            t,
            recon_start_offset: 0,
        };
        let mask = if case % 2 == 0 {
            build_grc_mask(&layout)
        } else {
            build_causal_mask(layout.total_len())
        };
        let n = layout.total_len();
        let embedded = random_rows(&mut rng, n, config.hidden_dim);
        let out = forward(
            &params,
            &ForwardInput {
                embedded: to_mat(&embedded),
                position_ids: (0..n).collect(),
                mask: &mask,
                past: None,
            },
        )
        .unwrap();
        let (hidden, logits) = oracle_forward(&params, &embedded, &(0..n).collect::<Vec<_>>(), &mask);
        assert!(
            max_abs_diff(&out.last_hidden, &hidden) <= 1e-10,
            "hidden diff {} in case {case}",
            max_abs_diff(&out.last_hidden, &hidden)
        );
        assert!(
            max_abs_diff(&out.logits, &logits) <= 1e-10,
            "logits diff {} in case {case}",
            max_abs_diff(&out.logits, &logits)
        );
    }
}

#[test]
fn full_forward_equals_incremental_with_past_kv_chaining() {
    let config = tiny_config(7);
    let params = init_model(&config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 12;
    let embedded = random_rows(&mut rng, n, config.hidden_dim);
    let mask = build_causal_mask(n);
    let full = forward(
        &params,
        &ForwardInput {
            embedded: to_mat(&embedded),
            position_ids: (0..n).collect(),
            mask: &mask,
            past: None,
        },
    )
    .unwrap();

    let mut past = PastKv::empty(config.num_layers, config.kv_dim());
    let step_mask = build_causal_mask(1);
    for i in 0..n {
        let out = forward(
            &params,
            &ForwardInput {
                embedded: to_mat(&vec![embedded[i].clone()]),
                position_ids: vec![i],
                mask: &step_mask,
                past: Some(&past),
            },
        )
        .unwrap();
        for j in 0..config.vocab_size {
            let diff = (out.logits.get(0, j) - full.logits.get(i, j)).abs();
            assert!(diff <= 1e-10, "row {i} col {j}: diff {diff}");
        }
        past.append(&out.new_kv, &[i]);
    }
}

#[test]
fn single_layer_second_segment_ignores_first_segment_inputs() {
    // Mask-zeroing at the model level: with one layer, K/V at latent
    // positions depend only on latent inputs, so perturbing segment ①
    // must leave every segment-④ row bit-for-bit unaffected beyond fp
    // noise.
    let mut config = tiny_config(21);
    config.num_layers = 1;
    let params = init_model(&config).unwrap();
    let layout = SegmentLayout {
        k: 4,
        m: 2,
        t: 3,
        recon_start_offset: 1,
    };
    let mask = build_grc_mask(&layout);
    let n = layout.total_len();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let base = random_rows(&mut rng, n, config.hidden_dim);
    let mut perturbed = base.clone();
    for row in perturbed.iter_mut().take(layout.k) {
        for v in row.iter_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
    let run = |rows: &Rows| {
        forward(
            &params,
            &ForwardInput {
                embedded: to_mat(rows),
                position_ids: (0..n).collect(),
                mask: &mask,
                past: None,
            },
        )
        .unwrap()
    };
    let a = run(&base);
    let b = run(&perturbed);
    for i in layout.second_segment_range() {
        for j in 0..config.vocab_size {
            assert!((a.logits.get(i, j) - b.logits.get(i, j)).abs() <= 1e-12);
        }
    }
    // Sanity: segment ① rows did change.
    assert!((a.logits.get(0, 0) - b.logits.get(0, 0)).abs() > 0.0);
}

#[test]
fn second_segment_is_a_pure_function_of_latent_kv() {
    // Reconstruction-blindness in its operational form: running segment ④
    // against only the latent K/V (as injected past) reproduces the
    // segment-④ rows of the full reconstruction-mask forward, for any
    // number of layers.
    let config = tiny_config(33);
    let params = init_model(&config).unwrap();
    let latents = LatentBank::init(3, config.hidden_dim, 9);
    let first: Vec<u32> = vec![20, 25, 30, 35, 21];
    let second: Vec<u32> = vec![17, 18, 19, 22];
    let layout = SegmentLayout::new(first.len(), 3, second.len(), 2).unwrap();
    let (embedded, position_ids, mask) =
        splice_latents(&params, &first, &latents, &second, &layout).unwrap();
    let full = forward(
        &params,
        &ForwardInput {
            embedded,
            position_ids,
            mask: &mask,
            past: None,
        },
    )
    .unwrap();

    // Latent K/V rows from the full pass become the only visible past.
    let latent_rows = layout.latent_range();
    let past = PastKv {
        layers: full
            .new_kv
            .iter()
            .map(|kv| grc_core::model::LayerKv {
                k: rows_of(&kv.k, latent_rows.clone()),
                v: rows_of(&kv.v, latent_rows.clone()),
            })
            .collect(),
        position_ids: latent_rows.clone().collect(),
    };
    let second_embedded = embed_tokens(&params, &second).unwrap();
    let out = forward(
        &params,
        &ForwardInput {
            embedded: second_embedded,
            position_ids: layout.second_segment_range().collect(),
            mask: &build_causal_mask(second.len()),
            past: Some(&past),
        },
    )
    .unwrap();
    for (local, global) in layout.second_segment_range().enumerate() {
        for j in 0..config.vocab_size {
            let diff = (out.logits.get(local, j) - full.logits.get(global, j)).abs();
            assert!(diff <= 1e-10, "row {global}: diff {diff}");
        }
    }
}

fn rows_of(mat: &Mat<f64>, range: std::ops::Range<usize>) -> Mat<f64> {
    let rows: Vec<&[f64]> = range.map(|i| mat.row(i)).collect();
    Mat::from_rows(&rows)
}
