// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{tokenize, Polarity, PromptTemplate, Sample};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// Word-level vocabulary. Ids are dense; `<pad>` and `<unk>` come first,
/// then the verbalizer words, then every other word in sorted order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocab { words, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Id of `word`, or [`UNK`].
    pub fn id_or_unk(&self, word: &str) -> usize {
        self.id(word).unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Label token ids in [`Polarity::ALL`] order.
    pub fn verbalizer(&self) -> [usize; 3] {
        Polarity::ALL.map(|p| self.id(p.word()).expect("verbalizer words are reserved"))
    }

    pub fn label_id(&self, p: Polarity) -> usize {
        self.verbalizer()[Polarity::ALL.iter().position(|&q| q == p).unwrap()]
    }

    /// Checks the fixed layout of reserved entries, e.g. after loading.
    pub fn validate(&self) -> Result<()> {
        let ok = self.words.len() >= 5
            && self.words[PAD] == "<pad>"
            && self.words[UNK] == "<unk>"
            && Polarity::ALL.iter().enumerate().all(|(i, p)| self.words[2 + i] == p.word())
            && self.index.len() == self.words.len();
        if ok {
            Ok(())
        } else {
            Err(Error::Data("malformed vocabulary (reserved entries or duplicates)".into()))
        }
    }
}

/// Builds the vocabulary covering every word of every rendered prompt.
///
/// `max_size` bounds the result, typically by the model's vocabulary size.
pub fn build_vocab(corpus: &[Sample], template: &PromptTemplate, max_size: Option<usize>) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut words: Vec<String> = vec!["<pad>".into(), "<unk>".into()];
    words.extend(Polarity::ALL.iter().map(|p| p.word().to_string()));
    let mut rest = BTreeSet::new();
    rest.extend(template.literal_words());
    for s in corpus {
        rest.extend(tokenize(&s.sentence));
        rest.extend(tokenize(&s.aspect));
    }
    for w in rest {
        if !words.contains(&w) {
            words.push(w);
        }
    }
    if let Some(max) = max_size {
        if words.len() > max {
            return Err(Error::Data(format!("vocabulary needs {} entries, model allows {max}", words.len())));
        }
    }
    Ok(Vocab::from(words))
}
