//! Byte-level tokenizer with a small reserved special-id block.
//!
//! Ids 0..16 are reserved for structural markers (message and role
//! framing); plain bytes map to `byte + 16`. Tokenizing text therefore
//! never produces a reserved id, and detokenizing drops the markers, so
//! `detokenize(tokenize(s)) == s` holds for any string.

/// Number of reserved special ids at the bottom of the vocabulary.
pub const NUM_SPECIALS: u32 = 16;

/// Smallest vocabulary that can represent every byte plus the specials.
pub const MIN_VOCAB_SIZE: usize = NUM_SPECIALS as usize + 256;

pub const PAD: u32 = 0;
/// Begin-of-message marker (the `<|im_start|>` equivalent).
pub const BOM: u32 = 1;
/// End-of-message marker (the `<|im_end|>` equivalent).
pub const EOM: u32 = 2;
pub const ROLE_USER: u32 = 3;
pub const ROLE_ASSISTANT: u32 = 4;
pub const ROLE_SYSTEM: u32 = 5;

pub fn is_special(id: u32) -> bool {
    id < NUM_SPECIALS
}

pub fn tokenize(text: &str) -> Vec<u32> {
    tokenize_bytes(text.as_bytes())
}

pub fn tokenize_bytes(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| u32::from(b) + NUM_SPECIALS).collect()
}

/// Inverse of `tokenize` on plain-byte ids; special ids are structural and
/// contribute no bytes.
pub fn detokenize_bytes(ids: &[u32]) -> Vec<u8> {
    ids.iter()
        .filter(|&&id| id >= NUM_SPECIALS)
        .map(|&id| (id - NUM_SPECIALS) as u8)
        .collect()
}

pub fn detokenize(ids: &[u32]) -> String {
    String::from_utf8_lossy(&detokenize_bytes(ids)).into_owned()
}

/// Debug rendering that keeps the markers visible.
pub fn render_with_markers(ids: &[u32]) -> String {
    let mut out = String::new();
    let mut run: Vec<u32> = Vec::new();
    let flush = |run: &mut Vec<u32>, out: &mut String| {
        if !run.is_empty() {
            out.push_str(&detokenize(run));
            run.clear();
        }
    };
    for &id in ids {
        if is_special(id) {
            flush(&mut run, &mut out);
            out.push_str(match id {
                PAD => "<|pad|>",
                BOM => "<|bom|>",
                EOM => "<|eom|>",
                ROLE_USER => "<|user|>",
                ROLE_ASSISTANT => "<|assistant|>",
                ROLE_SYSTEM => "<|system|>",
                _ => "<|reserved|>",
            });
        } else {
            run.push(id);
        }
    }
    flush(&mut run, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_round_trip() {
        assert_eq!(tokenize(""), Vec::<u32>::new());
        assert_eq!(detokenize(&[]), "");
    }

    #[test]
    fn plain_bytes_never_reserved() {
        for id in tokenize("hello, κόσμε\0\x01") {
            assert!(!is_special(id));
        }
    }

    #[test]
    fn ids_fit_minimum_vocab() {
        for id in tokenize_bytes(&(0..=255u8).collect::<Vec<_>>()) {
            assert!((id as usize) < MIN_VOCAB_SIZE);
        }
    }

    #[test]
    fn markers_render_and_drop() {
        let ids = [BOM, ROLE_USER, tokenize("hi")[0], tokenize("hi")[1], EOM];
        assert_eq!(detokenize(&ids), "hi");
        assert_eq!(render_with_markers(&ids), "<|bom|><|user|>hi<|eom|>");
    }

    proptest! {
        #[test]
        fn any_string_round_trips(s in ".*") {
            prop_assert_eq!(detokenize(&tokenize(&s)), s);
        }

        #[test]
        fn any_bytes_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            prop_assert_eq!(detokenize_bytes(&tokenize_bytes(&bytes)), bytes);
        }
    }
}
