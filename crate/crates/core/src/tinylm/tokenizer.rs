//! Character-level tokenization over printable ASCII.
//!
//! Vocabulary layout:
//!
//! | ids            | meaning                                   |
//! |----------------|-------------------------------------------|
//! | 0              | end-of-text (also the start marker)       |
//! | 1              | `[MASK]`                                  |
//! | 2              | unknown-key marker (local tokenizer only) |
//! | 3 ..= 97       | printable ASCII `' '..='~'`               |
//! | 98 .. vocab    | key slots (local tokenizer only)          |
//!
//! The public tokenizer never produces ids 2 or ≥ 98; a key string pushed
//! through it is split into ordinary characters.

use serde::Serialize;

use crate::error::{Error, Result};

pub const EOT: u32 = 0;
pub const MASK: u32 = 1;
pub const UNKNOWN_KEY: u32 = 2;
pub const FIRST_CHAR: u32 = 3;
pub const FIRST_KEY_SLOT: u32 = FIRST_CHAR + 95;
pub const MASK_LITERAL: &str = "[MASK]";

/// Smallest vocabulary that holds every public token plus one key slot.
pub const MIN_VOCAB: usize = FIRST_KEY_SLOT as usize + 1;

const CHAR_LO: u8 = b' ';
const CHAR_HI: u8 = b'~';

/// The public character tokenizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CharTokenizer {
    vocab_size: usize,
}

#[derive(Debug, Serialize)]
pub struct VocabEntry {
    pub id: u32,
    pub token: String,
}

impl CharTokenizer {
    pub fn new(vocab_size: usize) -> Result<Self> {
        if vocab_size < MIN_VOCAB {
            return Err(Error::invalid(format!(
                "vocab_size {vocab_size} too small for the character tokenizer (need at least {MIN_VOCAB})"
            )));
        }
        Ok(CharTokenizer { vocab_size })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn key_slots(&self) -> u32 {
        self.vocab_size as u32 - FIRST_KEY_SLOT
    }

    /// Tokens of `text`. The literal `[MASK]` is one token.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let bytes = text.as_bytes();
        let mut out = Vec::with_capacity(bytes.len());
        let mut i = 0;
        while i < bytes.len() {
            if bytes[i..].starts_with(MASK_LITERAL.as_bytes()) {
                out.push(MASK);
                i += MASK_LITERAL.len();
                continue;
            }
            let b = bytes[i];
            if !(CHAR_LO..=CHAR_HI).contains(&b) {
                return Err(Error::invalid(format!(
                    "character {:?} at byte {i} is not printable ASCII",
                    b as char
                )));
            }
            out.push(FIRST_CHAR + (b - CHAR_LO) as u32);
            i += 1;
        }
        Ok(out)
    }

    /// `EOT text EOT`: a training document with start and end markers.
    pub fn encode_document(&self, text: &str) -> Result<Vec<u32>> {
        let mut out = vec![EOT];
        out.extend(self.encode(text)?);
        out.push(EOT);
        Ok(out)
    }

    /// `EOT text`: a generation prompt.
    pub fn encode_prompt(&self, text: &str) -> Result<Vec<u32>> {
        let mut out = vec![EOT];
        out.extend(self.encode(text)?);
        Ok(out)
    }

    /// Text of public tokens. End-of-text and non-public ids decode to nothing.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut s = String::with_capacity(ids.len());
        for &id in ids {
            match id {
                MASK => s.push_str(MASK_LITERAL),
                id if is_char(id) => s.push((CHAR_LO + (id - FIRST_CHAR) as u8) as char),
                _ => {}
            }
        }
        s
    }

    /// Whether the public tokenizer can ever emit `id`.
    pub fn is_public(&self, id: u32) -> bool {
        id == EOT || id == MASK || is_char(id)
    }

    /// Every public vocabulary entry, for persistence.
    pub fn public_vocab(&self) -> Vec<VocabEntry> {
        let mut v = vec![
            VocabEntry {
                id: EOT,
                token: "<eot>".into(),
            },
            VocabEntry {
                id: MASK,
                token: MASK_LITERAL.into(),
            },
        ];
        for b in CHAR_LO..=CHAR_HI {
            v.push(VocabEntry {
                id: FIRST_CHAR + (b - CHAR_LO) as u32,
                token: (b as char).to_string(),
            });
        }
        v
    }
}

fn is_char(id: u32) -> bool {
    (FIRST_CHAR..FIRST_KEY_SLOT).contains(&id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_printable_text_and_mask() {
        let tok = CharTokenizer::new(160).unwrap();
        let text = "Case of [MASK] v. Orbis Ltd, 2019-03-14!";
        let ids = tok.encode(text).unwrap();
        assert_eq!(ids.iter().filter(|&&i| i == MASK).count(), 1);
        assert_eq!(tok.decode(&ids), text);
        assert!(ids.iter().all(|&i| tok.is_public(i)));
    }

    #[test]
    fn key_string_splits_into_characters() {
        let tok = CharTokenizer::new(160).unwrap();
        let ids = tok.encode("[SPECIAL_TOKEN=ALPHA]").unwrap();
        assert_eq!(ids.len(), "[SPECIAL_TOKEN=ALPHA]".len());
        assert!(ids.iter().all(|&i| i != UNKNOWN_KEY && i < FIRST_KEY_SLOT));
    }

    #[test]
    fn rejects_non_ascii_and_small_vocab() {
        let tok = CharTokenizer::new(160).unwrap();
        assert!(tok.encode("café").is_err());
        assert!(tok.encode("a\nb").is_err());
        assert!(CharTokenizer::new(98).is_err());
        assert_eq!(CharTokenizer::new(160).unwrap().key_slots(), 62);
    }
}
