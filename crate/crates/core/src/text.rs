//! Text preprocessing: normalization, hashed word tokens, hashed character trigrams.

use alloc::string::String;
use alloc::vec::Vec;

use crate::rng::fnv1a64;

/// Boundary marker placed around text before trigram extraction.
pub const BOUNDARY: char = '#';

/// Lowercases and collapses runs of whitespace into single spaces.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for word in text.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(word.chars().flat_map(char::to_lowercase));
    }
    out
}

/// Lowercased alphanumeric runs of `text`.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.chars().flat_map(char::to_lowercase).collect())
}

pub fn hash_bucket(token: &str, buckets: usize) -> usize {
    (fnv1a64(token.as_bytes()) % buckets as u64) as usize
}

/// Word token ids hashed into `vocab` buckets.
pub fn word_ids(text: &str, vocab: usize) -> Vec<usize> {
    words(text).map(|w| hash_bucket(&w, vocab)).collect()
}

/// Hashed character trigrams of `#text#`, duplicates kept. `text` is
/// expected to be normalized already.
pub fn char_trigram_ids(text: &str, vocab: usize) -> Vec<usize> {
    if text.is_empty() {
        log::warn!("trigrams requested for empty text");
        return Vec::new();
    }
    let chars: Vec<char> = core::iter::once(BOUNDARY).chain(text.chars()).chain(core::iter::once(BOUNDARY)).collect();
    let mut buf = String::new();
    chars
        .windows(3)
        .map(|w| {
            buf.clear();
            buf.extend(w);
            hash_bucket(&buf, vocab)
        })
        .collect()
}
