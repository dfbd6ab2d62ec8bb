//! Training-data assembly: chat templating, sequence augmentation with
//! latent slots and a reconstruction tail, and unification of generative
//! and embedding data into query/positive/negatives instances.

use crate::error::{GrcError, Result};
use crate::mask::SegmentLayout;
use crate::tokenizer::{self, BOM, EOM, ROLE_ASSISTANT, ROLE_USER};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::Path;

/// User instruction used for document-side sequences.
pub const DOC_INSTRUCTION: &str = "Represent this text";

/// Placeholder response for document-side sequences.
pub const NONE_RESPONSE: &str = "None";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatExample {
    pub u: String,
    pub x: String,
    pub y: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalExample {
    pub u: String,
    pub x: String,
    /// Reasoning trace for the query; supplied in the data files and may
    /// be "None".
    pub y: String,
    pub d_p: String,
    #[serde(default)]
    pub d_n: Vec<String>,
}

/// One line of a training-data file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DataRecord {
    Retrieval(RetrievalExample),
    Chat(ChatExample),
}

/// The eight fixed reconstruction instructions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReconstructionPromptSet {
    prompts: Vec<String>,
}

impl Default for ReconstructionPromptSet {
    fn default() -> Self {
        ReconstructionPromptSet {
            prompts: [
                "What was discussed in the previous conversation?",
                "What did we talk about in the last conversation?",
                "What did we cover in our last discussion?",
                "What were the key points of the previous conversation?",
                "Can you give an overview of what we talked about earlier?",
                "Remind me what our last conversation was about.",
                "What were we discussing earlier?",
                "What did we go over in the previous chat?",
            ]
            .into_iter()
            .map(str::to_owned)
            .collect(),
        }
    }
}

impl ReconstructionPromptSet {
    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }

    pub fn choose<R: Rng>(&self, rng: &mut R) -> &str {
        &self.prompts[rng.gen_range(0..self.prompts.len())]
    }
}

/// Token ids plus the (segment ①, latent block, segment ④) layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentedSequence {
    /// Segment ① token ids (`layout.k` of them).
    pub first: Vec<u32>,
    /// Segment ④ token ids: reconstruction instruction then recovered
    /// context (`layout.t` of them).
    pub second: Vec<u32>,
    pub layout: SegmentLayout,
    /// Absolute target positions within segment ① for the generation loss.
    pub response_span: Range<usize>,
    /// The declared source text the recovered context must detokenize to.
    pub context_text: String,
}

impl SegmentedSequence {
    /// The recovered-context token ids (the `c` span of segment ④).
    pub fn recon_tokens(&self) -> &[u32] {
        &self.second[self.layout.recon_start_offset..]
    }

    /// Token id at an absolute position; latent positions carry none.
    pub fn token_at(&self, pos: usize) -> Option<u32> {
        if pos < self.layout.k {
            Some(self.first[pos])
        } else if pos < self.layout.k + self.layout.m {
            None
        } else {
            self.second.get(pos - self.layout.k - self.layout.m).copied()
        }
    }

    pub fn total_len(&self) -> usize {
        self.layout.total_len()
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        if self.first.len() != self.layout.k || self.second.len() != self.layout.t {
            return Err(GrcError::ShapeMismatch(
                "segment token counts do not match layout".into(),
            ));
        }
        if tokenizer::detokenize(self.recon_tokens()) != self.context_text {
            return Err(GrcError::InvalidInput(
                "recovered context does not match declared source text".into(),
            ));
        }
        Ok(())
    }
}

/// Chat-template a `(u, x, y)` triple. Returns the token ids, the target
/// positions of the response (`y` plus its end-of-message marker) and the
/// plain text the byte content detokenizes to.
pub fn render_chat(u: &str, x: &str, y: &str) -> (Vec<u32>, Range<usize>, String) {
    let mut tokens = vec![BOM, ROLE_USER];
    tokens.extend(tokenizer::tokenize(&format!("{u}\n{x}\n")));
    tokens.push(EOM);
    tokens.push(BOM);
    tokens.push(ROLE_ASSISTANT);
    let resp_start = tokens.len();
    tokens.extend(tokenizer::tokenize(y));
    tokens.push(EOM);
    let resp_end = tokens.len();
    (tokens, resp_start..resp_end, format!("{u}\n{x}\n{y}"))
}

/// Build the augmented sequence for a generative example: `(u, x, y)` as
/// segment ①, `m` latent slots, then a reconstruction instruction drawn
/// from the prompt set followed by the recovered context, which echoes
/// segment ① verbatim.
pub fn augment_generative<R: Rng>(
    ex: &ChatExample,
    m: usize,
    prompts: &ReconstructionPromptSet,
    rng: &mut R,
) -> Result<SegmentedSequence> {
    if ex.y.is_empty() {
        return Err(GrcError::InvalidInput(
            "generative example requires a non-empty response".into(),
        ));
    }
    if m == 0 {
        return Err(GrcError::InvalidInput("m must be ≥ 1".into()));
    }
    let (first, response_span, plain) = render_chat(&ex.u, &ex.x, &ex.y);
    let r_p = prompts.choose(rng);
    let mut second = tokenizer::tokenize(r_p);
    let recon_start_offset = second.len();
    second.extend_from_slice(&first);
    let layout = SegmentLayout::new(first.len(), m, second.len(), recon_start_offset)?;
    Ok(SegmentedSequence {
        first,
        second,
        layout,
        response_span,
        context_text: plain,
    })
}

/// Build a document-side sequence: segment ① is
/// `(DOC_INSTRUCTION, doc, "None")` and the recovered context is the
/// document text itself.
pub fn augment_document<R: Rng>(
    doc: &str,
    m: usize,
    prompts: &ReconstructionPromptSet,
    rng: &mut R,
) -> Result<SegmentedSequence> {
    let (first, response_span, _) = render_chat(DOC_INSTRUCTION, doc, NONE_RESPONSE);
    let r_p = prompts.choose(rng);
    let mut second = tokenizer::tokenize(r_p);
    let recon_start_offset = second.len();
    second.extend(tokenizer::tokenize(doc));
    let layout = SegmentLayout::new(first.len(), m, second.len(), recon_start_offset)?;
    Ok(SegmentedSequence {
        first,
        second,
        layout,
        response_span,
        context_text: doc.to_owned(),
    })
}

/// Query, positive and negative sequences for a retrieval example.
pub fn augment_embedding<R: Rng>(
    ex: &RetrievalExample,
    m: usize,
    prompts: &ReconstructionPromptSet,
    rng: &mut R,
) -> Result<(SegmentedSequence, SegmentedSequence, Vec<SegmentedSequence>)> {
    if ex.d_p.is_empty() {
        return Err(GrcError::InvalidInput(
            "retrieval example requires a positive document".into(),
        ));
    }
    let query = augment_generative(
        &ChatExample {
            u: ex.u.clone(),
            x: ex.x.clone(),
            y: if ex.y.is_empty() {
                NONE_RESPONSE.to_owned()
            } else {
                ex.y.clone()
            },
        },
        m,
        prompts,
        rng,
    )?;
    let pos = augment_document(&ex.d_p, m, prompts, rng)?;
    let negs = ex
        .d_n
        .iter()
        .map(|d| augment_document(d, m, prompts, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok((query, pos, negs))
}

/// An augmented training item before batch unification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Augmented {
    Generative(SegmentedSequence),
    Embedding {
        query: SegmentedSequence,
        pos: SegmentedSequence,
        negs: Vec<SegmentedSequence>,
    },
}

impl Augmented {
    /// The sequence this item contributes as an in-batch negative
    /// candidate (its positive document).
    fn positive_sequence(&self) -> &SegmentedSequence {
        match self {
            Augmented::Generative(seq) => seq,
            Augmented::Embedding { pos, .. } => pos,
        }
    }
}

pub fn augment_record<R: Rng>(
    record: &DataRecord,
    m: usize,
    prompts: &ReconstructionPromptSet,
    rng: &mut R,
) -> Result<Augmented> {
    Ok(match record {
        DataRecord::Chat(ex) => Augmented::Generative(augment_generative(ex, m, prompts, rng)?),
        DataRecord::Retrieval(ex) => {
            let (query, pos, negs) = augment_embedding(ex, m, prompts, rng)?;
            Augmented::Embedding { query, pos, negs }
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExampleOrigin {
    Generative,
    Embedding,
}

/// Query/positive/negatives instance shared by all three losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnifiedExample {
    pub query_seq: SegmentedSequence,
    pub pos_seq: SegmentedSequence,
    pub neg_seqs: Vec<SegmentedSequence>,
    pub origin: ExampleOrigin,
}

/// Unify a mini-batch: generative examples use themselves as the positive
/// and draw negatives uniformly from the other batch members; embedding
/// examples pass through unchanged.
pub fn unify_batch<R: Rng>(batch: &[Augmented], rng: &mut R) -> Result<Vec<UnifiedExample>> {
    unify_batch_with(batch, 1, rng)
}

pub fn unify_batch_with<R: Rng>(
    batch: &[Augmented],
    num_negatives: usize,
    rng: &mut R,
) -> Result<Vec<UnifiedExample>> {
    let any_generative = batch.iter().any(|b| matches!(b, Augmented::Generative(_)));
    if any_generative && num_negatives > 0 && batch.len() < 2 {
        return Err(GrcError::InvalidInput(
            "a generative example needs at least one other batch member as negative".into(),
        ));
    }
    let mut out = Vec::with_capacity(batch.len());
    for (i, item) in batch.iter().enumerate() {
        match item {
            Augmented::Embedding { query, pos, negs } => out.push(UnifiedExample {
                query_seq: query.clone(),
                pos_seq: pos.clone(),
                neg_seqs: negs.clone(),
                origin: ExampleOrigin::Embedding,
            }),
            Augmented::Generative(seq) => {
                let mut neg_seqs = Vec::with_capacity(num_negatives);
                for _ in 0..num_negatives {
                    let mut pick = draw_other(batch.len(), i, rng);
                    // A negative textually identical to the positive is
                    // re-drawn once, then accepted.
                    if batch[pick].positive_sequence().first == seq.first {
                        pick = draw_other(batch.len(), i, rng);
                    }
                    neg_seqs.push(batch[pick].positive_sequence().clone());
                }
                out.push(UnifiedExample {
                    query_seq: seq.clone(),
                    pos_seq: seq.clone(),
                    neg_seqs,
                    origin: ExampleOrigin::Generative,
                });
            }
        }
    }
    Ok(out)
}

fn draw_other<R: Rng>(len: usize, skip: usize, rng: &mut R) -> usize {
    let pick = rng.gen_range(0..len - 1);
    if pick >= skip {
        pick + 1
    } else {
        pick
    }
}

/// Load line-delimited records (one JSON object per line, UTF-8).
pub fn load_records(path: &Path) -> Result<Vec<DataRecord>> {
    let file = std::fs::File::open(path)?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DataRecord = serde_json::from_str(&line).map_err(|e| {
            GrcError::MalformedRecord(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn save_records(path: &Path, records: &[DataRecord]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for record in records {
        serde_json::to_writer(&mut file, record)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn example() -> ChatExample {
        ChatExample {
            u: "Answer briefly.".into(),
            x: "What is 2+2?".into(),
            y: "4".into(),
        }
    }

    #[test]
    fn generative_layout_echoes_first_segment() {
        let prompts = ReconstructionPromptSet::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seq = augment_generative(&example(), 4, &prompts, &mut rng).unwrap();
        let r_p_len = seq.layout.recon_start_offset;
        assert_eq!(seq.layout.t, r_p_len + seq.layout.k);
        assert_eq!(seq.recon_tokens(), &seq.first[..]);
        assert_eq!(seq.layout.m, 4);
        seq.validate().unwrap();
    }

    #[test]
    fn prompt_choice_is_reproducible_and_varied() {
        let prompts = ReconstructionPromptSet::default();
        let draw = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            augment_generative(&example(), 2, &prompts, &mut rng)
                .unwrap()
                .layout
                .recon_start_offset
        };
        assert_eq!(draw(9), draw(9));
        // Ten distinct seeds must draw at least two distinct prompts.
        let mut lengths: Vec<usize> = (0..10).map(draw).collect();
        lengths.sort_unstable();
        lengths.dedup();
        assert!(lengths.len() >= 2, "prompt draws degenerate: {lengths:?}");
    }

    #[test]
    fn prompt_set_matches_fixed_table() {
        let prompts = ReconstructionPromptSet::default();
        assert_eq!(prompts.prompts().len(), 8);
        assert!(prompts
            .prompts()
            .iter()
            .any(|p| p == "What were we discussing earlier?"));
    }

    #[test]
    fn embedding_contexts_follow_roles() {
        let prompts = ReconstructionPromptSet::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ex = RetrievalExample {
            u: "Find the doc.".into(),
            x: "query text".into(),
            y: "reasoning".into(),
            d_p: "the positive document".into(),
            d_n: vec!["a negative doc".into()],
        };
        let (query, pos, negs) = augment_embedding(&ex, 2, &prompts, &mut rng).unwrap();
        assert_eq!(query.context_text, "Find the doc.\nquery text\nreasoning");
        assert_eq!(pos.context_text, "the positive document");
        assert_eq!(
            tokenizer::detokenize(pos.recon_tokens()),
            "the positive document"
        );
        assert_eq!(negs.len(), 1);
        assert_eq!(negs[0].context_text, "a negative doc");
        // Document instances carry the document instruction and None reply.
        let pos_text = tokenizer::detokenize(&pos.first);
        assert!(pos_text.starts_with(DOC_INSTRUCTION));
        assert!(pos_text.ends_with(NONE_RESPONSE));
    }

    #[test]
    fn empty_negatives_pass_through() {
        let prompts = ReconstructionPromptSet::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ex = RetrievalExample {
            u: "u".into(),
            x: "x".into(),
            y: "None".into(),
            d_p: "doc".into(),
            d_n: vec![],
        };
        let (_, _, negs) = augment_embedding(&ex, 2, &prompts, &mut rng).unwrap();
        assert!(negs.is_empty());
        let item = Augmented::Embedding {
            query: augment_generative(&example(), 2, &prompts, &mut rng).unwrap(),
            pos: augment_document("doc", 2, &prompts, &mut rng).unwrap(),
            negs,
        };
        let unified = unify_batch(&[item.clone()], &mut rng).unwrap();
        assert_eq!(unified[0].neg_seqs.len(), 0);
        match &item {
            Augmented::Embedding { query, pos, .. } => {
                assert_eq!(&unified[0].query_seq, query);
                assert_eq!(&unified[0].pos_seq, pos);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn pair_of_generative_examples_use_each_other() {
        let prompts = ReconstructionPromptSet::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = augment_generative(&example(), 2, &prompts, &mut rng).unwrap();
        let b = augment_generative(
            &ChatExample {
                u: "u2".into(),
                x: "x2".into(),
                y: "y2".into(),
            },
            2,
            &prompts,
            &mut rng,
        )
        .unwrap();
        let batch = [Augmented::Generative(a.clone()), Augmented::Generative(b.clone())];
        let unified = unify_batch(&batch, &mut rng).unwrap();
        assert_eq!(unified[0].query_seq, a);
        assert_eq!(unified[0].pos_seq, a);
        assert_eq!(unified[0].neg_seqs[0].first, b.first);
        assert_eq!(unified[1].neg_seqs[0].first, a.first);
    }

    #[test]
    fn single_generative_example_is_an_error() {
        let prompts = ReconstructionPromptSet::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = augment_generative(&example(), 2, &prompts, &mut rng).unwrap();
        assert!(unify_batch(&[Augmented::Generative(a)], &mut rng).is_err());
    }

    #[test]
    fn negative_draw_is_uniform_over_other_members() {
        // Monte Carlo over the uniform draw: batch of 8, each other member
        // should be chosen with frequency 1/7 ± 0.05.
        let prompts = ReconstructionPromptSet::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch: Vec<Augmented> = (0..8)
            .map(|i| {
                Augmented::Generative(
                    augment_generative(
                        &ChatExample {
                            u: format!("u{i}"),
                            x: format!("x{i}"),
                            y: format!("y{i}"),
                        },
                        2,
                        &prompts,
                        &mut rng,
                    )
                    .unwrap(),
                )
            })
            .collect();
        let mut counts = vec![0usize; 8];
        let trials = 1000;
        for _ in 0..trials {
            let unified = unify_batch(&batch, &mut rng).unwrap();
            let neg = &unified[0].neg_seqs[0];
            let idx = batch
                .iter()
                .position(|b| b.positive_sequence().first == neg.first)
                .unwrap();
            counts[idx] += 1;
        }
        assert_eq!(counts[0], 0, "an example may not be its own negative");
        for (i, &c) in counts.iter().enumerate().skip(1) {
            let freq = c as f64 / trials as f64;
            assert!((freq - 1.0 / 7.0).abs() <= 0.05, "member {i}: {freq}");
        }
    }

    #[test]
    fn generative_origin_is_self_positive() {
        let prompts = ReconstructionPromptSet::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let batch: Vec<Augmented> = (0..3)
            .map(|i| {
                Augmented::Generative(
                    augment_generative(
                        &ChatExample {
                            u: "u".into(),
                            x: format!("x{i}"),
                            y: "y".into(),
                        },
                        2,
                        &prompts,
                        &mut rng,
                    )
                    .unwrap(),
                )
            })
            .collect();
        for ex in unify_batch(&batch, &mut rng).unwrap() {
            assert_eq!(ex.origin, ExampleOrigin::Generative);
            assert_eq!(ex.query_seq, ex.pos_seq);
        }
    }

    #[test]
    fn records_round_trip_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let records = vec![
            DataRecord::Chat(example()),
            DataRecord::Retrieval(RetrievalExample {
                u: "u".into(),
                x: "x".into(),
                y: "None".into(),
                d_p: "pos".into(),
                d_n: vec!["neg1".into(), "neg2".into()],
            }),
        ];
        save_records(&path, &records).unwrap();
        assert_eq!(load_records(&path).unwrap(), records);
    }

    #[test]
    fn unified_example_round_trips_serialization() {
        let prompts = ReconstructionPromptSet::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = augment_generative(&example(), 2, &prompts, &mut rng).unwrap();
        let b = augment_generative(
            &ChatExample {
                u: "other".into(),
                x: "q".into(),
                y: "r".into(),
            },
            2,
            &prompts,
            &mut rng,
        )
        .unwrap();
        let unified =
            unify_batch(&[Augmented::Generative(a), Augmented::Generative(b)], &mut rng).unwrap();
        for ex in &unified {
            let json = serde_json::to_string(ex).unwrap();
            let back: UnifiedExample = serde_json::from_str(&json).unwrap();
            assert_eq!(&back, ex);
        }
    }
}
