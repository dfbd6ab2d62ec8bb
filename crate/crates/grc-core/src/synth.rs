//! Synthetic desk-scale corpora: templated facts with shared key tokens
//! between queries and their relevant documents, sized for CI.

use crate::data::{ChatExample, DataRecord, RetrievalExample};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const ADJECTIVES: [&str; 16] = [
    "amber", "coral", "ivory", "jade", "onyx", "pearl", "ruby", "slate", "teal", "umber", "azure",
    "ochre", "sable", "lilac", "maroon", "olive",
];

const NOUNS: [&str; 16] = [
    "falcon", "harbor", "lantern", "meadow", "nebula", "orchid", "plateau", "quarry", "reef",
    "summit", "tundra", "valley", "willow", "zenith", "canyon", "delta",
];

/// Deterministic key phrase for an index in `0..256`.
pub fn key_phrase(i: usize) -> String {
    format!("{} {}", ADJECTIVES[i % 16], NOUNS[(i / 16) % 16])
}

/// Deterministic code value for a key index.
pub fn key_code(i: usize) -> String {
    format!("{}", 11 + (i * 37) % 89)
}

/// Chat example binding a key to its code.
pub fn chat_fact(i: usize) -> ChatExample {
    ChatExample {
        u: "Recall.".into(),
        x: format!("Code of {}?", key_phrase(i)),
        y: format!("{} = {}.", key_phrase(i), key_code(i)),
    }
}

/// Templated chat corpus over the first `n` keys.
pub fn synth_chat_corpus(n: usize) -> Vec<ChatExample> {
    (0..n).map(chat_fact).collect()
}

/// The document text holding a key's fact.
pub fn doc_text(i: usize) -> String {
    format!(
        "Station log {}: site {} holds code {}.",
        i,
        key_phrase(i),
        key_code(i)
    )
}

fn query_text(i: usize) -> (String, String, String) {
    (
        "Find the site.".into(),
        format!("Which station holds {}?", key_phrase(i)),
        format!("It asks about {}.", key_phrase(i)),
    )
}

/// Retrieval corpus: query `i` is relevant to document `i`; negatives are
/// drawn from the other keys.
pub fn synth_retrieval_corpus(n: usize, rng: &mut ChaCha8Rng) -> Vec<RetrievalExample> {
    (0..n)
        .map(|i| {
            let (u, x, y) = query_text(i);
            let neg = loop {
                let j = rng.gen_range(0..n.max(2));
                if j != i {
                    break j;
                }
            };
            RetrievalExample {
                u,
                x,
                y,
                d_p: doc_text(i),
                d_n: vec![doc_text(neg)],
            }
        })
        .collect()
}

/// Mixed training corpus: chat facts plus retrieval examples, shuffled.
pub fn synth_mixed_corpus(
    n_chat: usize,
    n_retrieval: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<DataRecord> {
    let mut records: Vec<DataRecord> = synth_chat_corpus(n_chat)
        .into_iter()
        .map(DataRecord::Chat)
        .collect();
    records.extend(
        synth_retrieval_corpus(n_retrieval, rng)
            .into_iter()
            .map(DataRecord::Retrieval),
    );
    records.shuffle(rng);
    records
}

/// Queries with relevance-labeled candidate documents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalEvalSet {
    pub queries: Vec<EvalQuery>,
    pub docs: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalQuery {
    pub u: String,
    pub x: String,
    /// Reference reasoning (used when embedding without generation).
    pub y: String,
    /// Indices into `docs` with gain 1; every query has at least one.
    pub relevant: Vec<usize>,
}

/// `num_queries` queries over a `num_docs` document pool; query `i` is
/// relevant exactly to document `i`, the rest are keyed distractors.
pub fn synth_eval_set(num_queries: usize, num_docs: usize) -> RetrievalEvalSet {
    assert!(num_queries <= num_docs && num_docs <= 256);
    let docs: Vec<String> = (0..num_docs).map(doc_text).collect();
    let queries = (0..num_queries)
        .map(|i| {
            let (u, x, y) = query_text(i);
            EvalQuery {
                u,
                x,
                y,
                relevant: vec![i],
            }
        })
        .collect();
    RetrievalEvalSet { queries, docs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn keys_are_distinct_up_to_256() {
        let mut keys: Vec<String> = (0..256).map(key_phrase).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 256);
    }

    #[test]
    fn eval_set_shape_and_relevance() {
        let set = synth_eval_set(64, 256);
        assert_eq!(set.queries.len(), 64);
        assert_eq!(set.docs.len(), 256);
        for (i, q) in set.queries.iter().enumerate() {
            assert!(!q.relevant.is_empty());
            assert!(set.docs[q.relevant[0]].contains(&key_phrase(i)));
        }
    }

    #[test]
    fn retrieval_negatives_differ_from_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for ex in synth_retrieval_corpus(32, &mut rng) {
            assert_ne!(ex.d_n[0], ex.d_p);
        }
    }
}
