//! GRC: one small decoder-only transformer that generates, embeds and
//! compresses context in a single forward pass, plus the serving pieces
//! around it — a hybrid paged attention engine and a compressed-KV memory
//! store.

pub mod bench;
pub mod bundle;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod linalg;
pub mod mask;
pub mod memory;
pub mod model;
pub mod objectives;
pub mod paged;
pub mod patterns;
pub mod serve;
pub mod synth;
pub mod tokenizer;

pub use error::{GrcError, Result};
