//! Word-level tokenizer for the reference backbone.
//!
//! Text is lowercased and split on whitespace; ASCII punctuation becomes its
//! own token. The bracketed special tokens are matched literally.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const MASK: &str = "[MASK]";
pub const SEP: &str = "[SEP]";

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

/// Splits text into normalized word pieces without vocabulary lookup.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut current = String::new();
        let mut rest = chunk;
        while let Some(ch) = rest.chars().next() {
            if let Some(special) = [PAD, UNK, MASK, SEP].iter().find(|s| rest.starts_with(**s)) {
                if !current.is_empty() {
                    out.push(std::mem::take(&mut current));
                }
                out.push(special.to_string());
                rest = &rest[special.len()..];
                continue;
            }
            if ch.is_ascii_punctuation() {
                if !current.is_empty() {
                    out.push(std::mem::take(&mut current));
                }
                out.push(ch.to_string());
            } else {
                current.extend(ch.to_lowercase());
            }
            rest = &rest[ch.len_utf8()..];
        }
        if !current.is_empty() {
            out.push(current);
        }
    }
    out
}

impl Tokenizer {
    /// Builds a vocabulary from the given texts. Word order is first-seen, so
    /// the same corpus always yields the same ids.
    pub fn build<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut words: Vec<String> = [PAD, UNK, MASK, SEP]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut index: HashMap<String, TokenId> = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as TokenId))
            .collect();
        for text in texts {
            for w in split_words(text) {
                if !index.contains_key(&w) {
                    index.insert(w.clone(), words.len() as TokenId);
                    words.push(w);
                }
            }
        }
        Self { words, index }
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as TokenId))
            .collect();
        Self { words, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn token_id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn pad_id(&self) -> TokenId {
        0
    }
    pub fn unk_id(&self) -> TokenId {
        1
    }
    pub fn mask_id(&self) -> TokenId {
        2
    }
    pub fn sep_id(&self) -> TokenId {
        3
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        split_words(text)
            .iter()
            .map(|w| self.token_id(w).unwrap_or(self.unk_id()))
            .collect()
    }

    pub fn decode_token(&self, id: TokenId) -> &str {
        self.words
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(UNK)
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.decode_token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation_and_lowercases() {
        assert_eq!(
            split_words("Good, It was [MASK]."),
            vec!["good", ",", "it", "was", "[MASK]", "."]
        );
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let tok = Tokenizer::build(["a great movie"]);
        assert_eq!(
            tok.encode("great film"),
            vec![tok.token_id("great").unwrap(), tok.unk_id()]
        );
        assert_eq!(tok.decode(&tok.encode("a great")), "a great");
        assert_eq!(
            tok.encode("[MASK] [SEP]"),
            vec![tok.mask_id(), tok.sep_id()]
        );
    }
}
