//! Persistent memory store: one file per record under a root directory,
//! written via temp-file + atomic rename, with a sidecar index rebuilt by
//! directory scan on startup.

use super::CompressedMemory;
use crate::error::{GrcError, Result};
use crate::model::fingerprint_digest;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

const RECORD_EXT: &str = "grcmem";
const TMP_EXT: &str = "tmp";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ListEntry {
    pub doc_id: String,
    pub m: u32,
    pub num_layers: u32,
    pub bytes: u64,
}

#[derive(Debug, Clone)]
struct IndexEntry {
    path: PathBuf,
    summary: ListEntry,
}

/// Store mutations serialize per key behind the index lock; reads copy the
/// path out and hit the filesystem without blocking writers of other keys.
pub struct MemoryStore {
    root: PathBuf,
    index: RwLock<HashMap<String, IndexEntry>>,
    tmp_counter: AtomicU64,
}

impl MemoryStore {
    /// Open (or create) a store root and rebuild the index by scanning
    /// record files. Leftover temp files from interrupted writes are
    /// removed; files that fail to decode are ignored.
    pub fn open(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        let mut index = HashMap::new();
        for entry in std::fs::read_dir(root)? {
            let entry = entry?;
            let path = entry.path();
            match path.extension().and_then(|e| e.to_str()) {
                Some(TMP_EXT) => {
                    let _ = std::fs::remove_file(&path);
                }
                Some(RECORD_EXT) => {
                    let bytes = std::fs::read(&path)?;
                    if let Ok(memory) = CompressedMemory::decode(&bytes) {
                        index.insert(
                            memory.meta.doc_id.clone(),
                            IndexEntry {
                                path: path.clone(),
                                summary: summarize(&memory, bytes.len() as u64),
                            },
                        );
                    }
                }
                _ => {}
            }
        }
        Ok(MemoryStore {
            root: root.to_owned(),
            index: RwLock::new(index),
            tmp_counter: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn record_path(&self, doc_id: &str) -> PathBuf {
        self.root.join(format!("{}.{RECORD_EXT}", file_stem(doc_id)))
    }

    /// Atomic per-key overwrite: encode, write to a temp file, fsync,
    /// rename into place, then publish in the index.
    pub fn put(&self, memory: &CompressedMemory) -> Result<()> {
        memory.validate()?;
        let bytes = memory.encode();
        let final_path = self.record_path(&memory.meta.doc_id);
        let tmp_path = self.root.join(format!(
            "{}.{}.{TMP_EXT}",
            file_stem(&memory.meta.doc_id),
            self.tmp_counter.fetch_add(1, Ordering::Relaxed)
        ));
        {
            let mut file = std::fs::File::create(&tmp_path)?;
            file.write_all(&bytes)?;
            file.sync_all()?;
        }
        std::fs::rename(&tmp_path, &final_path)?;
        let mut index = self.index.write().expect("index lock poisoned");
        index.insert(
            memory.meta.doc_id.clone(),
            IndexEntry {
                path: final_path,
                summary: summarize(memory, bytes.len() as u64),
            },
        );
        Ok(())
    }

    /// Byte-identical read-back of the stored record.
    pub fn get(&self, doc_id: &str) -> Result<CompressedMemory> {
        let path = {
            let index = self.index.read().expect("index lock poisoned");
            index
                .get(doc_id)
                .map(|e| e.path.clone())
                .ok_or_else(|| GrcError::UnknownDoc(doc_id.to_owned()))?
        };
        let bytes = std::fs::read(&path).map_err(|_| GrcError::UnknownDoc(doc_id.to_owned()))?;
        CompressedMemory::decode(&bytes)
    }

    pub fn delete(&self, doc_id: &str) -> Result<()> {
        let entry = {
            let mut index = self.index.write().expect("index lock poisoned");
            index
                .remove(doc_id)
                .ok_or_else(|| GrcError::UnknownDoc(doc_id.to_owned()))?
        };
        std::fs::remove_file(&entry.path)?;
        Ok(())
    }

    /// All keys with their latent count, layer count and byte size,
    /// sorted by doc id.
    pub fn list(&self) -> Vec<ListEntry> {
        let index = self.index.read().expect("index lock poisoned");
        let mut entries: Vec<ListEntry> = index.values().map(|e| e.summary.clone()).collect();
        entries.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        entries
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.index
            .read()
            .expect("index lock poisoned")
            .contains_key(doc_id)
    }

    pub fn len(&self) -> usize {
        self.index.read().expect("index lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn summarize(memory: &CompressedMemory, bytes: u64) -> ListEntry {
    ListEntry {
        doc_id: memory.meta.doc_id.clone(),
        m: memory.meta.m,
        num_layers: memory.meta.num_layers,
        bytes,
    }
}

/// File stem: short sanitized prefix for debuggability plus a 64-bit
/// content hash of the full id for uniqueness.
fn file_stem(doc_id: &str) -> String {
    let sanitized: String = doc_id
        .chars()
        .take(24)
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    format!("{sanitized}-{:016x}", fingerprint_digest(doc_id.as_bytes()))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::linalg::Mat;
    use crate::memory::MemoryMeta;
    use crate::model::LayerKv;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_memory(rng: &mut ChaCha8Rng, doc_id: &str) -> CompressedMemory {
        let m = rng.gen_range(1..5);
        let layers = rng.gen_range(1..4);
        let heads = 2usize;
        let d_h = 3usize;
        let kv: Vec<LayerKv<f32>> = (0..layers)
            .map(|_| LayerKv {
                k: Mat::from_vec(
                    m,
                    heads * d_h,
                    (0..m * heads * d_h).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                ),
                v: Mat::from_vec(
                    m,
                    heads * d_h,
                    (0..m * heads * d_h).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                ),
            })
            .collect();
        let positions: Vec<usize> = (5..5 + m).collect();
        CompressedMemory::from_layer_kv(doc_id, rng.gen(), &positions, &kv, heads, d_h).unwrap()
    }

    #[test]
    fn put_get_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let store = MemoryStore::open(dir.path()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mem = random_memory(&mut rng, "doc-a");
        store.put(&mem).unwrap();
        assert_eq!(store.get("doc-a").unwrap(), mem);
    }

    #[test]
    fn get_unknown_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        let store = MemoryStore::open(dir.path()).unwrap();
        assert!(matches!(store.get("nope"), Err(GrcError::UnknownDoc(_))));
        assert!(matches!(store.delete("nope"), Err(GrcError::UnknownDoc(_))));
    }

    #[test]
    fn put_overwrites_atomically_per_key() {
        let dir = tempfile::tempdir().unwrap();
        let store = MemoryStore::open(dir.path()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_memory(&mut rng, "doc");
        let b = random_memory(&mut rng, "doc");
        store.put(&a).unwrap();
        store.put(&b).unwrap();
        assert_eq!(store.get("doc").unwrap(), b);
        assert_eq!(store.len(), 1);
    }

    #[test]
    fn list_reports_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let store = MemoryStore::open(dir.path()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for name in ["b", "a"] {
            store.put(&random_memory(&mut rng, name)).unwrap();
        }
        let listing = store.list();
        assert_eq!(listing.len(), 2);
        assert_eq!(listing[0].doc_id, "a");
        assert!(listing[0].bytes > 0);
    }

    #[test]
    fn rejects_payload_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let store = MemoryStore::open(dir.path()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut mem = random_memory(&mut rng, "doc");
        mem.payload.pop();
        assert!(store.put(&mem).is_err());
    }

    #[test]
    fn reopen_recovers_index_and_ignores_torn_tmp() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_memory(&mut rng, "stable");
        let b = random_memory(&mut rng, "stable");
        {
            let store = MemoryStore::open(dir.path()).unwrap();
            store.put(&a).unwrap();
            // Simulate a crash mid-put of the second version: a torn temp
            // file exists but the rename never happened.
            let torn = dir.path().join("stable-partial.0.tmp");
            std::fs::write(&torn, &b.encode()[..10]).unwrap();
        }
        let store = MemoryStore::open(dir.path()).unwrap();
        assert_eq!(store.get("stable").unwrap(), a);
        assert_eq!(store.len(), 1);
        // The temp file was cleaned up on recovery.
        let leftovers: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .path()
                    .extension()
                    .is_some_and(|x| x == "tmp")
            })
            .collect();
        assert!(leftovers.is_empty());
    }

    #[test]
    fn meta_only_records_are_validated_on_decode() {
        let meta = MemoryMeta {
            doc_id: "x".into(),
            model_fingerprint: 1,
            m: 2,
            num_layers: 1,
            num_kv_heads: 1,
            head_dim: 2,
            dtype: super::super::DtypeTag::F32,
            position_ids: vec![3, 3], // not strictly increasing
        };
        let mem = CompressedMemory {
            payload: vec![0; meta.expected_payload_len()],
            meta,
        };
        assert!(mem.validate().is_err());
    }
}
