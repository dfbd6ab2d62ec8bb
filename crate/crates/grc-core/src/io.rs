//! Model file format.
//!
//! Layout: 8-byte magic `GRCMODEL`, u32 version (currently 1), the config
//! as fixed-width little-endian fields (num_layers, hidden_dim,
//! num_q_heads, num_kv_heads, head_dim, vocab_size, elem_bytes as u32;
//! rope_base as f64; seed as u64), then u32 latent count `m` and u32
//! adapter `embed_dim`, then every parameter blob as little-endian IEEE-754
//! f64 in the canonical order of [`GrcModel::visit`].

use crate::bundle::GrcModel;
use crate::error::{GrcError, Result};
use crate::model::ModelConfig;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"GRCMODEL";
const VERSION: u32 = 1;

pub fn save_model(path: &Path, model: &GrcModel) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let c = &model.params.config;
    for v in [
        c.num_layers,
        c.hidden_dim,
        c.num_q_heads,
        c.num_kv_heads,
        c.head_dim,
        c.vocab_size,
        c.elem_bytes,
    ] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    w.write_all(&c.rope_base.to_le_bytes())?;
    w.write_all(&c.seed.to_le_bytes())?;
    w.write_all(&(model.m() as u32).to_le_bytes())?;
    w.write_all(&(model.head.embed_dim() as u32).to_le_bytes())?;
    let mut io_err: Option<std::io::Error> = None;
    model.visit(&mut |_, slice| {
        if io_err.is_some() {
            return;
        }
        for &v in slice {
            if let Err(e) = w.write_all(&v.to_le_bytes()) {
                io_err = Some(e);
                return;
            }
        }
    });
    if let Some(e) = io_err {
        return Err(e.into());
    }
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<GrcModel> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(GrcError::MalformedRecord("bad model magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(GrcError::MalformedRecord(format!(
            "unsupported model version {version}"
        )));
    }
    let config = ModelConfig {
        num_layers: read_u32(&mut r)? as usize,
        hidden_dim: read_u32(&mut r)? as usize,
        num_q_heads: read_u32(&mut r)? as usize,
        num_kv_heads: read_u32(&mut r)? as usize,
        head_dim: read_u32(&mut r)? as usize,
        vocab_size: read_u32(&mut r)? as usize,
        elem_bytes: read_u32(&mut r)? as usize,
        rope_base: read_f64(&mut r)?,
        seed: read_u64(&mut r)?,
    };
    let m = read_u32(&mut r)? as usize;
    let embed_dim = read_u32(&mut r)? as usize;
    let mut model = GrcModel::init(&config, m, embed_dim)?;
    let mut read_err: Option<GrcError> = None;
    model.visit_mut(&mut |_, slice| {
        if read_err.is_some() {
            return;
        }
        for v in slice.iter_mut() {
            let mut bytes = [0u8; 8];
            match r.read_exact(&mut bytes) {
                Ok(()) => *v = f64::from_le_bytes(bytes),
                Err(e) => {
                    read_err = Some(GrcError::MalformedRecord(format!(
                        "model file truncated: {e}"
                    )));
                    return;
                }
            }
        }
    });
    if let Some(e) = read_err {
        return Err(e);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(GrcError::MalformedRecord("trailing bytes in model file".into()));
    }
    Ok(model)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
