//! Compressed document memories: the O(1)-length per-layer K/V of the
//! latent tokens, with provenance metadata, a bit-exact record codec, a
//! persistent store and a small framed TCP server/client.

mod store;
mod wire;

pub use store::MemoryStore;
pub use wire::{serve, MemoryClient, ServerHandle, DEFAULT_FRAME_CAP};

use crate::error::{GrcError, Result};
use crate::linalg::Mat;
use crate::model::{LayerKv, PastKv};
use serde::{Deserialize, Serialize};

/// On-disk / on-wire element type. Only f32 is produced at desk scale;
/// the tag reserves room for a 16-bit format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DtypeTag {
    F32,
    F16,
}

impl DtypeTag {
    pub fn elem_bytes(self) -> usize {
        match self {
            DtypeTag::F32 => 4,
            DtypeTag::F16 => 2,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            DtypeTag::F32 => 0,
            DtypeTag::F16 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DtypeTag::F32),
            1 => Ok(DtypeTag::F16),
            other => Err(GrcError::MalformedRecord(format!("unknown dtype tag {other}"))),
        }
    }
}

/// Metadata describing a stored memory (everything but the payload).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryMeta {
    pub doc_id: String,
    pub model_fingerprint: u64,
    pub m: u32,
    pub num_layers: u32,
    pub num_kv_heads: u32,
    pub head_dim: u32,
    pub dtype: DtypeTag,
    pub position_ids: Vec<u32>,
}

impl MemoryMeta {
    pub fn kv_dim(&self) -> usize {
        (self.num_kv_heads * self.head_dim) as usize
    }

    pub fn expected_payload_len(&self) -> usize {
        2 * self.num_layers as usize
            * self.m as usize
            * self.kv_dim()
            * self.dtype.elem_bytes()
    }
}

/// A compressed context: per-layer K rows then V rows of the `m` latent
/// tokens, little-endian, constant size regardless of the original
/// context length.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedMemory {
    pub meta: MemoryMeta,
    pub payload: Vec<u8>,
}

impl CompressedMemory {
    pub fn validate(&self) -> Result<()> {
        if self.payload.len() != self.meta.expected_payload_len() {
            return Err(GrcError::MalformedRecord(format!(
                "payload length {} != expected {}",
                self.payload.len(),
                self.meta.expected_payload_len()
            )));
        }
        if self.meta.position_ids.len() != self.meta.m as usize {
            return Err(GrcError::MalformedRecord(
                "position id count != m".into(),
            ));
        }
        if self.meta.position_ids.windows(2).any(|w| w[1] <= w[0]) {
            return Err(GrcError::MalformedRecord(
                "position ids must be strictly increasing".into(),
            ));
        }
        Ok(())
    }

    /// Pack per-layer latent K/V rows (each `m × kv_dim`) into a record.
    pub fn from_layer_kv(
        doc_id: &str,
        model_fingerprint: u64,
        position_ids: &[usize],
        kv: &[LayerKv<f32>],
        num_kv_heads: usize,
        head_dim: usize,
    ) -> Result<Self> {
        let m = position_ids.len();
        let kv_dim = num_kv_heads * head_dim;
        let mut payload =
            Vec::with_capacity(2 * kv.len() * m * kv_dim * std::mem::size_of::<f32>());
        for layer in kv {
            if layer.k.rows() != m || layer.k.cols() != kv_dim {
                return Err(GrcError::ShapeMismatch("latent kv rows mismatch".into()));
            }
            for &v in layer.k.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            for &v in layer.v.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let memory = CompressedMemory {
            meta: MemoryMeta {
                doc_id: doc_id.to_owned(),
                model_fingerprint,
                m: m as u32,
                num_layers: kv.len() as u32,
                num_kv_heads: num_kv_heads as u32,
                head_dim: head_dim as u32,
                dtype: DtypeTag::F32,
                position_ids: position_ids.iter().map(|&p| p as u32).collect(),
            },
            payload,
        };
        memory.validate()?;
        Ok(memory)
    }

    /// Unpack into per-layer K/V matrices (f32 only).
    pub fn to_layer_kv(&self) -> Result<Vec<LayerKv<f32>>> {
        self.validate()?;
        if self.meta.dtype != DtypeTag::F32 {
            return Err(GrcError::MalformedRecord(
                "only f32 payloads are decodable at desk scale".into(),
            ));
        }
        let m = self.meta.m as usize;
        let kv_dim = self.meta.kv_dim();
        let mut layers = Vec::with_capacity(self.meta.num_layers as usize);
        let mut offset = 0;
        let mut read_mat = |offset: &mut usize| {
            let mut data = Vec::with_capacity(m * kv_dim);
            for _ in 0..m * kv_dim {
                let bytes: [u8; 4] = self.payload[*offset..*offset + 4].try_into().unwrap();
                data.push(f32::from_le_bytes(bytes));
                *offset += 4;
            }
            Mat::from_vec(m, kv_dim, data)
        };
        for _ in 0..self.meta.num_layers {
            let k = read_mat(&mut offset);
            let v = read_mat(&mut offset);
            layers.push(LayerKv { k, v });
        }
        Ok(layers)
    }

    /// View as injectable past KV with the stored position ids.
    pub fn to_past_kv(&self) -> Result<PastKv<f32>> {
        Ok(PastKv {
            layers: self.to_layer_kv()?,
            position_ids: self.meta.position_ids.iter().map(|&p| p as usize).collect(),
        })
    }

    pub fn max_position(&self) -> Option<usize> {
        self.meta.position_ids.last().map(|&p| p as usize)
    }

    /// On-disk record encoding: magic `GRCMEM01`, fixed-width header
    /// fields in declared order (fingerprint, m, L, H_kv, d_h, dtype,
    /// position ids, doc id), then the payload.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.meta.model_fingerprint.to_le_bytes());
        out.extend_from_slice(&self.meta.m.to_le_bytes());
        out.extend_from_slice(&self.meta.num_layers.to_le_bytes());
        out.extend_from_slice(&self.meta.num_kv_heads.to_le_bytes());
        out.extend_from_slice(&self.meta.head_dim.to_le_bytes());
        out.extend_from_slice(&u32::from(self.meta.dtype.code()).to_le_bytes());
        for &p in &self.meta.position_ids {
            out.extend_from_slice(&p.to_le_bytes());
        }
        let doc_bytes = self.meta.doc_id.as_bytes();
        out.extend_from_slice(&(doc_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(doc_bytes);
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, offset: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(GrcError::MalformedRecord("bad magic".into()));
        }
        let model_fingerprint = r.u64()?;
        let m = r.u32()?;
        let num_layers = r.u32()?;
        let num_kv_heads = r.u32()?;
        let head_dim = r.u32()?;
        let dtype = DtypeTag::from_code(r.u32()? as u8)?;
        let mut position_ids = Vec::with_capacity(m as usize);
        for _ in 0..m {
            position_ids.push(r.u32()?);
        }
        let doc_len = r.u32()? as usize;
        let doc_id = String::from_utf8(r.take(doc_len)?.to_vec())
            .map_err(|_| GrcError::MalformedRecord("doc id is not utf-8".into()))?;
        let payload_len = r.u64()? as usize;
        let payload = r.take(payload_len)?.to_vec();
        if r.offset != bytes.len() {
            return Err(GrcError::MalformedRecord("trailing bytes".into()));
        }
        let memory = CompressedMemory {
            meta: MemoryMeta {
                doc_id,
                model_fingerprint,
                m,
                num_layers,
                num_kv_heads,
                head_dim,
                dtype,
                position_ids,
            },
            payload,
        };
        memory.validate()?;
        Ok(memory)
    }
}

const MAGIC: &[u8; 8] = b"GRCMEM01";

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(GrcError::MalformedRecord("record truncated".into()));
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
