//! Word-level tokenization.
//!
//! The shipped [`HashTokenizer`] maps each normalized word to one id by
//! hashing into a fixed vocabulary. Anything implementing [`Tokenizer`] can
//! replace it, including subword tokenizers that emit several ids per word.

use serde::{Deserialize, Serialize};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
const RESERVED: u32 = 3;

pub trait Tokenizer: Send + Sync {
    /// Ids for one normalized word (at least one).
    fn word_ids(&self, word: &str) -> Vec<u32>;

    /// Maximum sequence length including the BOS and EOS markers.
    fn context_length(&self) -> usize;

    fn vocab_size(&self) -> usize;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashTokenizer {
    vocab_size: u32,
    context_length: usize,
}

impl HashTokenizer {
    pub fn new(vocab_size: usize, context_length: usize) -> Self {
        assert!(vocab_size > RESERVED as usize, "vocabulary too small");
        assert!(context_length >= 3, "context must fit BOS, one word and EOS");
        Self {
            vocab_size: vocab_size as u32,
            context_length,
        }
    }
}

impl Tokenizer for HashTokenizer {
    fn word_ids(&self, word: &str) -> Vec<u32> {
        vec![RESERVED + (fnv1a(word.as_bytes()) % u64::from(self.vocab_size - RESERVED)) as u32]
    }

    fn context_length(&self) -> usize {
        self.context_length
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size as usize
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Lowercases and strips surrounding punctuation; drops empty words.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Token ids of a word sequence wrapped in BOS/EOS, plus the index of the
/// word each token came from (`None` for the markers). Words that do not fit
/// the context are dropped.
pub fn encode_words(tok: &dyn Tokenizer, words: &[String]) -> (Vec<u32>, Vec<Option<usize>>) {
    let budget = tok.context_length() - 2;
    let mut ids = vec![BOS_ID];
    let mut owners = vec![None];
    for (wi, w) in words.iter().enumerate() {
        let piece = tok.word_ids(w);
        if ids.len() - 1 + piece.len() > budget {
            break;
        }
        owners.extend(std::iter::repeat_n(Some(wi), piece.len()));
        ids.extend(piece);
    }
    ids.push(EOS_ID);
    owners.push(None);
    (ids, owners)
}
