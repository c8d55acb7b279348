// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic aspect-based sentiment data: corpus generation, word-level
//! tokenization, vocabulary and prompt rendering.

mod corpus;
mod prompt;
mod vocab;

use serde::{Deserialize, Serialize};

pub use corpus::{
    contrastive_mask, domain_counts, generate_corpus, is_test_sample, read_corpus, resolve_domain, split_domains, write_corpus,
    CorpusSpec, DomainLexicon, DomainSplit, OpinionLexicon, SentenceTemplate, TemplateKind,
};
pub use prompt::{render_all, render_prompt, write_prompt_dump, PromptRendering, PromptTemplate};
pub use vocab::{build_vocab, Vocab, PAD, UNK};

use crate::rng::fnv1a;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
    Neutral,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Positive, Polarity::Negative, Polarity::Neutral];

    /// The verbalizer word for this label.
    pub fn word(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
            Polarity::Neutral => "neutral",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.word() == w)
    }
}

impl std::fmt::Display for Polarity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.word())
    }
}

/// One `(sentence, aspect, polarity)` example tagged with its domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub sentence: String,
    pub aspect: String,
    pub polarity: Polarity,
    pub domain: String,
}

impl Sample {
    /// Stable identifier derived from sentence and aspect text.
    pub fn id(&self) -> u64 {
        let mut key = Vec::with_capacity(self.sentence.len() + self.aspect.len() + 1);
        key.extend_from_slice(self.sentence.as_bytes());
        key.push(0x1f);
        key.extend_from_slice(self.aspect.as_bytes());
        fnv1a(&key)
    }
}

/// Lowercases, splits on whitespace and splits ASCII punctuation into
/// separate tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for c in chunk.chars() {
            if c.is_ascii_punctuation() && c != '\'' && c != '-' {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(c.to_string());
            } else {
                word.extend(c.to_lowercase());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_splits_punctuation_and_lowercases() {
        assert_eq!(
            tokenize("The Battery-pack, was GREAT!  ok"),
            vec!["the", "battery-pack", ",", "was", "great", "!", "ok"]
        );
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn polarity_words_round_trip() {
        for p in Polarity::ALL {
            assert_eq!(Polarity::from_word(p.word()), Some(p));
        }
        assert_eq!(Polarity::from_word("mixed"), None);
    }

    #[test]
    fn sample_ids_depend_on_aspect() {
        let a = Sample {
            sentence: "the food was great but the staff was rude".into(),
            aspect: "food".into(),
            polarity: Polarity::Positive,
            domain: "restaurant".into(),
        };
        let mut b = a.clone();
        b.aspect = "staff".into();
        assert_ne!(a.id(), b.id());
        assert_eq!(a.id(), a.clone().id());
    }
}
