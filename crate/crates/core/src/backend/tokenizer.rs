//! Word-hashing tokenizer for the toy backbone.
//!
//! Text is lowercased and split into alphanumeric runs and single
//! punctuation characters; each piece hashes (FNV-1a) into the non-special
//! part of the vocabulary.

use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
/// Sequence start: `[CLS]` in encoder mode, BOS in decoder mode.
pub const CLS: u32 = 1;
pub const MASK: u32 = 2;
pub const UNK: u32 = 3;
pub const NUM_SPECIAL: u32 = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence(pub Vec<u32>);

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab_size: u32,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Tokenizer {
    pub fn new(vocab_size: usize) -> Self {
        assert!(vocab_size as u32 > NUM_SPECIAL, "vocab must exceed the special tokens");
        Tokenizer { vocab_size: vocab_size as u32 }
    }

    pub fn pieces(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut cur = String::new();
        for ch in text.chars() {
            if ch.is_alphanumeric() {
                cur.extend(ch.to_lowercase());
            } else {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                if !ch.is_whitespace() {
                    out.push(ch.to_string());
                }
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
        out
    }

    pub fn token_id(&self, piece: &str) -> u32 {
        NUM_SPECIAL + (fnv1a(piece) % (self.vocab_size - NUM_SPECIAL) as u64) as u32
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        TokenSequence(Self::pieces(text).iter().map(|p| self.token_id(p)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation() {
        assert_eq!(Tokenizer::pieces("How do you Butter toast?"), ["how", "do", "you", "butter", "toast", "?"]);
        assert!(Tokenizer::pieces("   ").is_empty());
    }

    #[test]
    fn ids_avoid_specials() {
        let t = Tokenizer::new(8);
        for w in ["a", "b", "zebra", "?", "PersonX"] {
            let id = t.token_id(w);
            assert!((NUM_SPECIAL..8).contains(&id));
        }
        assert_eq!(t.encode("Toast"), t.encode("toast"));
    }
}
