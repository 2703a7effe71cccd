//! Token vocabulary with five reserved ids.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{split_tokens, Passage};
use crate::util::fnv1a_hex;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const BOS_ID: u32 = 3;
pub const EOS_ID: u32 = 4;

/// Marker strings recognized verbatim (whitespace-delimited) by
/// [`Vocab::tokenize`]; index in this table == reserved id.
pub const RESERVED_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[SEP]", "[BOS]", "[EOS]"];

/// Dense token -> id map. Ids 0..5 are reserved; corpus tokens follow in
/// (frequency desc, lexicographic asc) order.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocab {
    tokens: Vec<String>,
    lookup: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize, Clone)]
struct VocabFile {
    version: u32,
    tokens: Vec<String>,
}

impl From<VocabFile> for Vocab {
    fn from(f: VocabFile) -> Self {
        Vocab::from_tokens(f.tokens)
    }
}

impl From<Vocab> for VocabFile {
    fn from(v: Vocab) -> Self {
        VocabFile {
            version: 1,
            tokens: v.tokens,
        }
    }
}

impl Vocab {
    /// Vocabulary over the passages' token streams (title + text),
    /// keeping tokens with corpus frequency >= `min_freq`.
    pub fn build(passages: &[Passage], min_freq: usize) -> Vocab {
        assert!(min_freq >= 1, "min_freq must be >= 1");
        let mut freq: HashMap<String, u64> = HashMap::new();
        for p in passages {
            for tok in split_tokens(&p.title).into_iter().chain(split_tokens(&p.text)) {
                *freq.entry(tok).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, u64)> = freq
            .into_iter()
            .filter(|(_, c)| *c >= min_freq as u64)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Vocab::from_tokens(kept.into_iter().map(|(t, _)| t).collect())
    }

    fn from_tokens(tokens: Vec<String>) -> Vocab {
        let lookup = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32 + RESERVED_TOKENS.len() as u32))
            .collect();
        Vocab { tokens, lookup }
    }

    /// Total id count, reserved ids included.
    pub fn size(&self) -> usize {
        self.tokens.len() + RESERVED_TOKENS.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.lookup.get(token).copied()
    }

    /// Token string for an id; reserved ids render as their markers.
    pub fn token(&self, id: u32) -> &str {
        let id = id as usize;
        if id < RESERVED_TOKENS.len() {
            RESERVED_TOKENS[id]
        } else {
            &self.tokens[id - RESERVED_TOKENS.len()]
        }
    }

    /// Whitespace chunks equal to a reserved marker map to its id; all
    /// other chunks split lexically, with OOV mapped to UNK.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for chunk in text.split_whitespace() {
            if let Some(r) = RESERVED_TOKENS.iter().position(|m| *m == chunk) {
                ids.push(r as u32);
                continue;
            }
            for tok in split_tokens(chunk) {
                ids.push(self.id(&tok).unwrap_or(UNK_ID));
            }
        }
        ids
    }

    /// Space-joined token strings, dropping PAD/BOS/EOS.
    pub fn decode(&self, ids: &[u32]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&id| id != PAD_ID && id != BOS_ID && id != EOS_ID)
            .map(|&id| self.token(id))
            .collect();
        words.join(" ")
    }

    /// Fingerprint of the full token inventory; checkpoints store it and
    /// refuse to load against a different vocabulary.
    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::new();
        for t in &self.tokens {
            bytes.extend_from_slice(t.as_bytes());
            bytes.push(0);
        }
        fnv1a_hex(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn passage(text: &str) -> Passage {
        Passage {
            passage_id: "d:0".into(),
            doc_id: "d".into(),
            title: String::new(),
            text: text.into(),
            paragraph_ids: vec![("d".into(), 0)],
        }
    }

    #[test]
    fn frequency_then_lexicographic_order() {
        let v = Vocab::build(&[passage("a a b")], 1);
        assert_eq!(v.size(), 7);
        assert_eq!(v.id("a"), Some(5));
        assert_eq!(v.id("b"), Some(6));

        // Tie on frequency falls back to lexicographic.
        let v = Vocab::build(&[passage("b b a a c")], 1);
        assert_eq!(v.id("a"), Some(5));
        assert_eq!(v.id("b"), Some(6));
        assert_eq!(v.id("c"), Some(7));
    }

    #[test]
    fn min_freq_filters_rare_tokens() {
        let v = Vocab::build(&[passage("a a b")], 2);
        assert_eq!(v.id("a"), Some(5));
        assert_eq!(v.id("b"), None);
        assert_eq!(v.tokenize("b"), vec![UNK_ID]);
    }

    #[test]
    fn empty_corpus_keeps_only_reserved() {
        let v = Vocab::build(&[], 1);
        assert_eq!(v.size(), RESERVED_TOKENS.len());
    }

    #[test]
    fn tokenize_maps_words_and_markers() {
        let v = Vocab::build(&[passage("paris france x y")], 1);
        let paris = v.id("paris").unwrap();
        let france = v.id("france").unwrap();
        assert_eq!(v.tokenize("Paris, France"), vec![paris, france]);
        assert_eq!(v.tokenize(""), Vec::<u32>::new());
        assert_eq!(v.tokenize("zzz"), vec![UNK_ID]);
        let x = v.id("x").unwrap();
        let y = v.id("y").unwrap();
        assert_eq!(v.tokenize("x [SEP] y"), vec![x, SEP_ID, y]);
    }

    #[test]
    fn decode_skips_structural_ids() {
        let v = Vocab::build(&[passage("paris france")], 1);
        let ids = vec![BOS_ID, v.id("paris").unwrap(), v.id("france").unwrap(), EOS_ID];
        assert_eq!(v.decode(&ids), "paris france");
    }

    #[test]
    fn fingerprint_tracks_inventory() {
        let a = Vocab::build(&[passage("a b")], 1);
        let b = Vocab::build(&[passage("a b")], 1);
        let c = Vocab::build(&[passage("a c")], 1);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn serde_round_trip_preserves_ids() {
        let v = Vocab::build(&[passage("a a b c")], 1);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back.id("a"), v.id("a"));
        assert_eq!(back.id("c"), v.id("c"));
        assert_eq!(back.fingerprint(), v.fingerprint());
    }
}
