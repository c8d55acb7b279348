// SPDX-License-Identifier: MIT OR Apache-2.0

use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{tokenize, Polarity, Sample, Vocab};
use crate::error::{Error, Result};

/// Prompt text with `{S}` and `{A}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub text: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            id: "review-aspect-sentiment".into(),
            text: "review : {S} . aspect : {A} . sentiment :".into(),
        }
    }
}

enum Piece<'a> {
    Literal(&'a str),
    Sentence,
    Aspect,
}

impl PromptTemplate {
    fn pieces(&self) -> Result<Vec<Piece<'_>>> {
        let mut out = Vec::new();
        let mut rest = self.text.as_str();
        let mut saw_s = false;
        while let Some(pos) = rest.find('{') {
            out.push(Piece::Literal(&rest[..pos]));
            let tail = &rest[pos..];
            if let Some(t) = tail.strip_prefix("{S}") {
                if saw_s {
                    return Err(Error::Data(format!("template `{}` repeats {{S}}", self.text)));
                }
                saw_s = true;
                out.push(Piece::Sentence);
                rest = t;
            } else if let Some(t) = tail.strip_prefix("{A}") {
                out.push(Piece::Aspect);
                rest = t;
            } else {
                return Err(Error::Data(format!("template `{}` has an unknown placeholder", self.text)));
            }
        }
        out.push(Piece::Literal(rest));
        if !saw_s {
            return Err(Error::Data(format!("template `{}` lacks {{S}}", self.text)));
        }
        Ok(out)
    }

    /// Words contributed by the template itself.
    pub fn literal_words(&self) -> Vec<String> {
        self.pieces()
            .map(|ps| {
                ps.iter()
                    .flat_map(|p| match p {
                        Piece::Literal(s) => tokenize(s),
                        _ => Vec::new(),
                    })
                    .collect()
            })
            .unwrap_or_default()
    }
}

/// A tokenized prompt with its aspect located. Positions are 0-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRendering {
    pub ids: Vec<usize>,
    /// Contiguous positions of the aspect inside the embedded sentence.
    pub aspect_positions: Vec<usize>,
    pub gold: usize,
    pub polarity: Polarity,
    /// Label token ids in [`Polarity::ALL`] order.
    pub verbalizer: [usize; 3],
    pub sample_id: u64,
    pub template_id: String,
}

impl PromptRendering {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn aspect_first(&self) -> usize {
        self.aspect_positions[0]
    }

    pub fn aspect_last(&self) -> usize {
        *self.aspect_positions.last().unwrap()
    }
}

/// Renders `sample` through `template`, failing if the aspect is not a
/// word subsequence of the sentence or the prompt is longer than `max_len`.
pub fn render_prompt(
    sample: &Sample,
    vocab: &Vocab,
    template: &PromptTemplate,
    max_len: usize,
) -> Result<PromptRendering> {
    let sentence = tokenize(&sample.sentence);
    let aspect = tokenize(&sample.aspect);
    if aspect.is_empty() {
        return Err(Error::Data(format!("empty aspect in `{}`", sample.sentence)));
    }
    let at = sentence
        .windows(aspect.len())
        .position(|w| w == aspect.as_slice())
        .ok_or_else(|| Error::Data(format!("aspect `{}` not found in `{}`", sample.aspect, sample.sentence)))?;

    let mut words: Vec<String> = Vec::new();
    let mut aspect_positions = Vec::new();
    for piece in template.pieces()? {
        match piece {
            Piece::Literal(s) => words.extend(tokenize(s)),
            Piece::Sentence => {
                aspect_positions = (0..aspect.len()).map(|k| words.len() + at + k).collect();
                words.extend(sentence.iter().cloned());
            }
            Piece::Aspect => words.extend(aspect.iter().cloned()),
        }
    }
    if words.len() > max_len {
        return Err(Error::Data(format!(
            "prompt has {} tokens, limit is {max_len}: `{}`",
            words.len(),
            sample.sentence
        )));
    }
    Ok(PromptRendering {
        ids: words.iter().map(|w| vocab.id_or_unk(w)).collect(),
        aspect_positions,
        gold: vocab.label_id(sample.polarity),
        polarity: sample.polarity,
        verbalizer: vocab.verbalizer(),
        sample_id: sample.id(),
        template_id: template.id.clone(),
    })
}

pub fn render_all(
    samples: &[Sample],
    vocab: &Vocab,
    template: &PromptTemplate,
    max_len: usize,
) -> Result<Vec<PromptRendering>> {
    samples.iter().map(|s| render_prompt(s, vocab, template, max_len)).collect()
}

#[derive(Serialize)]
struct DumpLine<'a> {
    ids: &'a [usize],
    /// 1-based, as in every exported file.
    aspect_indices: Vec<usize>,
    gold: usize,
    template: &'a str,
}

/// Debug dump: one JSON object per prompt.
pub fn write_prompt_dump(path: &Path, prompts: &[PromptRendering]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in prompts {
        let line = DumpLine {
            ids: &p.ids,
            aspect_indices: p.aspect_positions.iter().map(|i| i + 1).collect(),
            gold: p.gold,
            template: &p.template_id,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, generate_corpus, CorpusSpec, UNK};

    fn sample(sentence: &str, aspect: &str) -> Sample {
        Sample {
            sentence: sentence.into(),
            aspect: aspect.into(),
            polarity: Polarity::Negative,
            domain: "device".into(),
        }
    }

    /// Scans the rendered words for the aspect after the `review :` prefix.
    fn scan(words: &[&str], aspect: &[&str]) -> Vec<usize> {
        let start = 2;
        (start..words.len())
            .find(|&i| words[i..].starts_with(aspect))
            .map(|i| (i..i + aspect.len()).collect())
            .unwrap_or_default()
    }

    #[test]
    fn locates_single_and_multi_word_aspects() {
        let s1 = sample("the battery was great but the screen was dim", "screen");
        let s2 = sample("the battery life was poor", "battery life");
        let vocab = build_vocab(&[s1.clone(), s2.clone()], &PromptTemplate::default(), None).unwrap();
        for s in [&s1, &s2] {
            let r = render_prompt(s, &vocab, &PromptTemplate::default(), 64).unwrap();
            let words: Vec<&str> = r.ids.iter().map(|&i| vocab.word(i).unwrap()).collect();
            let asp = tokenize(&s.aspect);
            let asp: Vec<&str> = asp.iter().map(String::as_str).collect();
            assert_eq!(r.aspect_positions, scan(&words, &asp));
            assert_eq!(words.last(), Some(&":"));
            assert_eq!(r.gold, vocab.id("negative").unwrap());
        }
        let r2 = render_prompt(&s2, &vocab, &PromptTemplate::default(), 64).unwrap();
        assert_eq!(r2.aspect_positions, vec![3, 4]);
    }

    #[test]
    fn missing_aspect_and_length_errors() {
        let s = sample("the battery was great", "keyboard");
        let vocab = build_vocab(&[sample("the battery was great", "battery")], &PromptTemplate::default(), None).unwrap();
        assert!(render_prompt(&s, &vocab, &PromptTemplate::default(), 64).is_err());
        let ok = sample("the battery was great", "battery");
        assert!(render_prompt(&ok, &vocab, &PromptTemplate::default(), 5).is_err());
        let bad = PromptTemplate {
            id: "x".into(),
            text: "{A} only".into(),
        };
        assert!(render_prompt(&ok, &vocab, &bad, 64).is_err());
    }

    #[test]
    fn whole_corpus_renders_without_unknowns() {
        let corpus = generate_corpus(&CorpusSpec::default()).unwrap();
        let t = PromptTemplate::default();
        let vocab = build_vocab(&corpus, &t, None).unwrap();
        for s in &corpus {
            let r = render_prompt(s, &vocab, &t, 64).unwrap();
            assert!(!r.ids.contains(&UNK));
            let back: Vec<&str> = r.aspect_positions.iter().map(|&i| vocab.word(r.ids[i]).unwrap()).collect();
            assert_eq!(back.join(" "), tokenize(&s.aspect).join(" "));
            assert!(r.aspect_positions.windows(2).all(|w| w[1] == w[0] + 1));
        }
    }

    #[test]
    fn dump_uses_one_based_indices() {
        let s = sample("the battery was great", "battery");
        let vocab = build_vocab(std::slice::from_ref(&s), &PromptTemplate::default(), None).unwrap();
        let r = render_prompt(&s, &vocab, &PromptTemplate::default(), 64).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        write_prompt_dump(&path, std::slice::from_ref(&r)).unwrap();
        let v: serde_json::Value = serde_json::from_str(std::fs::read_to_string(&path).unwrap().trim()).unwrap();
        assert_eq!(v["aspect_indices"][0].as_u64().unwrap() as usize, r.aspect_positions[0] + 1);
    }
}
