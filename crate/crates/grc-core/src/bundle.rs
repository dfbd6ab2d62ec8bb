//! The trainable unit: transformer weights, the latent bank and the
//! embedding adapter, with one canonical parameter order shared by
//! flattening, serialization and the model fingerprint.

use crate::error::{GrcError, Result};
use crate::linalg::Mat;
use crate::model::{init_model, LatentBank, ModelConfig, ModelParameters};
use crate::objectives::EmbeddingHead;

/// Complete model bundle.
#[derive(Debug, Clone)]
pub struct GrcModel {
    pub params: ModelParameters<f64>,
    pub latents: LatentBank,
    pub head: EmbeddingHead,
}

impl GrcModel {
    pub fn init(config: &ModelConfig, m: usize, embed_dim: usize) -> Result<Self> {
        let params = init_model(config)?;
        Ok(GrcModel {
            latents: LatentBank::init(m, config.hidden_dim, config.seed),
            head: EmbeddingHead::init(config.hidden_dim, embed_dim, config.seed),
            params,
        })
    }

    pub fn m(&self) -> usize {
        self.latents.m()
    }

    /// Visit every parameter slice in the canonical order: embedding,
    /// per-layer `[attn_norm, wq, wk, wv, wo, mlp_norm, w_gate, w_up,
    /// w_down]`, final_norm, lm_head, latent vectors, adapter weight,
    /// adapter bias.
    pub fn visit(&self, f: &mut impl FnMut(&str, &[f64])) {
        f("embedding", self.params.embedding.data());
        for (l, layer) in self.params.layers.iter().enumerate() {
            f(&format!("layer{l}.attn_norm"), &layer.attn_norm);
            f(&format!("layer{l}.wq"), layer.wq.data());
            f(&format!("layer{l}.wk"), layer.wk.data());
            f(&format!("layer{l}.wv"), layer.wv.data());
            f(&format!("layer{l}.wo"), layer.wo.data());
            f(&format!("layer{l}.mlp_norm"), &layer.mlp_norm);
            f(&format!("layer{l}.w_gate"), layer.w_gate.data());
            f(&format!("layer{l}.w_up"), layer.w_up.data());
            f(&format!("layer{l}.w_down"), layer.w_down.data());
        }
        f("final_norm", &self.params.final_norm);
        f("lm_head", self.params.lm_head.data());
        f("latent_bank", self.latents.vectors.data());
        f("adapter.weight", self.head.weight.data());
        f("adapter.bias", &self.head.bias);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut [f64])) {
        f("embedding", self.params.embedding.data_mut());
        for (l, layer) in self.params.layers.iter_mut().enumerate() {
            f(&format!("layer{l}.attn_norm"), &mut layer.attn_norm);
            f(&format!("layer{l}.wq"), layer.wq.data_mut());
            f(&format!("layer{l}.wk"), layer.wk.data_mut());
            f(&format!("layer{l}.wv"), layer.wv.data_mut());
            f(&format!("layer{l}.wo"), layer.wo.data_mut());
            f(&format!("layer{l}.mlp_norm"), &mut layer.mlp_norm);
            f(&format!("layer{l}.w_gate"), layer.w_gate.data_mut());
            f(&format!("layer{l}.w_up"), layer.w_up.data_mut());
            f(&format!("layer{l}.w_down"), layer.w_down.data_mut());
        }
        f("final_norm", &mut self.params.final_norm);
        f("lm_head", self.params.lm_head.data_mut());
        f("latent_bank", self.latents.vectors.data_mut());
        f("adapter.weight", self.head.weight.data_mut());
        f("adapter.bias", &mut self.head.bias);
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, s| n += s.len());
        n
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, s| flat.extend_from_slice(s));
        flat
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut(&mut |_, s| {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        });
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    /// Named parameter groups with their ranges in the flat vector.
    pub fn param_groups(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let mut groups = Vec::new();
        let mut offset = 0;
        self.visit(&mut |name, s| {
            groups.push((name.to_owned(), offset..offset + s.len()));
            offset += s.len();
        });
        groups
    }

    /// 64-bit digest over the serialized config plus the first and last
    /// parameter blocks. Cheap, and sufficient to catch model/memory
    /// mismatches at desk scale.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::new();
        push_config_bytes(&mut bytes, &self.params.config, self.m(), self.head.embed_dim());
        for &v in self.params.embedding.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &self.head.bias {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        crate::model::fingerprint_digest(&bytes)
    }
}

pub(crate) fn push_config_bytes(bytes: &mut Vec<u8>, c: &ModelConfig, m: usize, embed_dim: usize) {
    for v in [
        c.num_layers,
        c.hidden_dim,
        c.num_q_heads,
        c.num_kv_heads,
        c.head_dim,
        c.vocab_size,
        c.elem_bytes,
        m,
        embed_dim,
    ] {
        bytes.extend_from_slice(&(v as u32).to_le_bytes());
    }
    bytes.extend_from_slice(&c.rope_base.to_le_bytes());
    bytes.extend_from_slice(&c.seed.to_le_bytes());
}

/// Gradients for every trainable parameter, mirroring [`GrcModel`].
#[derive(Debug, Clone)]
pub struct GrcGrads {
    pub params: crate::model::ParamGrads,
    pub latents: Mat<f64>,
    pub head_weight: Mat<f64>,
    pub head_bias: Vec<f64>,
}

impl GrcGrads {
    pub fn zeros(model: &GrcModel) -> Self {
        GrcGrads {
            params: crate::model::ParamGrads::zeros(&model.params),
            latents: Mat::zeros(model.latents.m(), model.latents.dim()),
            head_weight: Mat::zeros(model.head.weight.rows(), model.head.weight.cols()),
            head_bias: vec![0.0; model.head.bias.len()],
        }
    }

    pub fn accumulate(&mut self, other: &GrcGrads) {
        self.params.accumulate(&other.params);
        self.latents.add_assign(&other.latents);
        self.head_weight.add_assign(&other.head_weight);
        for (a, &b) in self.head_bias.iter_mut().zip(&other.head_bias) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.visit_mut(&mut |slice| {
            for v in slice {
                *v *= s;
            }
        });
    }

    /// Same canonical order as [`GrcModel::visit`].
    pub fn visit(&self, f: &mut impl FnMut(&[f64])) {
        f(self.params.embedding.data());
        for layer in &self.params.layers {
            f(&layer.attn_norm);
            f(layer.wq.data());
            f(layer.wk.data());
            f(layer.wv.data());
            f(layer.wo.data());
            f(&layer.mlp_norm);
            f(layer.w_gate.data());
            f(layer.w_up.data());
            f(layer.w_down.data());
        }
        f(&self.params.final_norm);
        f(self.params.lm_head.data());
        f(self.latents.data());
        f(self.head_weight.data());
        f(&self.head_bias);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut [f64])) {
        f(self.params.embedding.data_mut());
        for layer in &mut self.params.layers {
            f(&mut layer.attn_norm);
            f(layer.wq.data_mut());
            f(layer.wk.data_mut());
            f(layer.wv.data_mut());
            f(layer.wo.data_mut());
            f(&mut layer.mlp_norm);
            f(layer.w_gate.data_mut());
            f(layer.w_up.data_mut());
            f(layer.w_down.data_mut());
        }
        f(&mut self.params.final_norm);
        f(self.params.lm_head.data_mut());
        f(self.latents.data_mut());
        f(self.head_weight.data_mut());
        f(&mut self.head_bias);
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        self.visit(&mut |s| flat.extend_from_slice(s));
        flat
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |s| ok &= s.iter().all(|v| v.is_finite()));
        ok
    }
}

impl GrcModel {
    /// Validate that a memory record was produced by this model.
    pub fn check_fingerprint(&self, record: u64) -> Result<()> {
        let model = self.fingerprint();
        if record != model {
            return Err(GrcError::FingerprintMismatch { record, model });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_round_trip() {
        let config = ModelConfig::toy();
        let mut model = GrcModel::init(&config, 4, 32).unwrap();
        let flat = model.to_flat();
        assert_eq!(flat.len(), model.num_params());
        let mut perturbed = flat.clone();
        perturbed[17] += 0.5;
        model.set_from_flat(&perturbed);
        assert_eq!(model.to_flat(), perturbed);
    }

    #[test]
    fn fingerprint_distinguishes_models() {
        let config = ModelConfig::toy();
        let a = GrcModel::init(&config, 4, 32).unwrap();
        let mut cfg2 = config;
        cfg2.seed = 99;
        let b = GrcModel::init(&cfg2, 4, 32).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
        assert!(a.check_fingerprint(b.fingerprint()).is_err());
    }

    #[test]
    fn grads_include_every_parameter_group() {
        let config = ModelConfig::toy();
        let model = GrcModel::init(&config, 4, 32).unwrap();
        let grads = GrcGrads::zeros(&model);
        assert_eq!(grads.to_flat().len(), model.num_params());
    }
}
