//! Word-level tokenizer over the synthetic grammar.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::SyntheticWorldConfig;

pub const NULL_TOKEN: usize = 0;
pub const UNK_TOKEN: usize = 1;
pub const EOS_TOKEN: usize = 2;

const SPECIALS: [&str; 3] = ["<null>", "<unk>", "<eos>"];
const GRAMMAR_WORDS: [&str; 10] = [
    "a", "change", "from", "to", "and", "keep", "the", "item", "same", "none",
];

/// Token ids plus a validity mask (`false` marks padding).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        let mask = vec![true; ids.len()];
        Self { ids, mask }
    }

    /// The null text: a single reserved token.
    pub fn null() -> Self {
        Self::new(vec![NULL_TOKEN])
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Position of the last unmasked token, where the pooled vector is read.
    pub fn last_valid(&self) -> usize {
        self.mask.iter().rposition(|&m| m).unwrap_or(0)
    }

    pub fn validate(&self, vocab: usize, max_len: usize) -> Result<()> {
        if self.mask.len() != self.ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "token mask has {} entries for {} ids",
                self.mask.len(),
                self.ids.len()
            )));
        }
        if !self.mask.iter().any(|&m| m) {
            return Err(Error::ShapeMismatch("token sequence has no unmasked token".into()));
        }
        if self.ids.len() > max_len {
            return Err(Error::ShapeMismatch(format!(
                "{} tokens exceed max_text_len {max_len}",
                self.ids.len()
            )));
        }
        if let Some(&id) = self.ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    words: Vec<String>,
}

impl Tokenizer {
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut out: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for w in words {
            let w = w.into().to_lowercase();
            if !out.contains(&w) {
                out.push(w);
            }
        }
        Self { words: out }
    }

    /// Vocabulary of the oracle caption/diff grammar for a world.
    pub fn for_world(world: &SyntheticWorldConfig) -> Self {
        let mut words: Vec<String> = GRAMMAR_WORDS.iter().map(|s| s.to_string()).collect();
        for attr in &world.attributes {
            words.push(attr.name.clone());
            words.extend(attr.values.iter().cloned());
        }
        Self::from_words(words)
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id_of(&self, word: &str) -> usize {
        self.words
            .iter()
            .skip(SPECIALS.len())
            .position(|w| w == word)
            .map(|p| p + SPECIALS.len())
            .unwrap_or(UNK_TOKEN)
    }

    /// Lowercased whitespace words (edge punctuation stripped), truncated to
    /// `max_len - 1`, then an end-of-sequence token.
    pub fn encode(&self, text: &str, max_len: usize) -> TokenSequence {
        let mut ids: Vec<usize> = text
            .split_whitespace()
            .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
            .filter(|w| !w.is_empty())
            .map(|w| self.id_of(&w))
            .take(max_len.saturating_sub(1))
            .collect();
        ids.push(EOS_TOKEN);
        TokenSequence::new(ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encodes_known_and_unknown_words() {
        let tok = Tokenizer::for_world(&SyntheticWorldConfig::default());
        let seq = tok.encode("Change color from red to Blue!", 16);
        assert_eq!(seq.len(), 7);
        assert_eq!(*seq.ids.last().unwrap(), EOS_TOKEN);
        assert!(seq.ids[..6].iter().all(|&id| id > EOS_TOKEN));
        let unk = tok.encode("zebra", 16);
        assert_eq!(unk.ids, vec![UNK_TOKEN, EOS_TOKEN]);
    }

    #[test]
    fn truncates_to_max_len() {
        let tok = Tokenizer::for_world(&SyntheticWorldConfig::default());
        let seq = tok.encode(&"red ".repeat(40), 16);
        assert_eq!(seq.len(), 16);
        seq.validate(tok.vocab_size(), 16).unwrap();
    }

    #[test]
    fn validation_errors() {
        assert!(matches!(
            TokenSequence::new(vec![5]).validate(4, 8),
            Err(Error::TokenOutOfRange { id: 5, vocab: 4 })
        ));
        let all_pad = TokenSequence {
            ids: vec![0],
            mask: vec![false],
        };
        assert!(all_pad.validate(4, 8).is_err());
        TokenSequence::null().validate(4, 8).unwrap();
    }
}
