// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{tokenize, Polarity, Sample};
use crate::error::{Error, Result};
use crate::rng::{fnv1a, splitmix64, Purpose, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateKind {
    /// One aspect, slots `{a}` and `{o}`.
    Single,
    /// Two aspects sharing one opinion, slots `{a1}`, `{a2}`, `{o}`.
    SharedOpinion,
    /// Two aspects with different polarities, slots `{a1}`, `{o1}`, `{a2}`, `{o2}`.
    Contrastive,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceTemplate {
    pub kind: TemplateKind,
    pub text: String,
}

impl SentenceTemplate {
    pub fn new(kind: TemplateKind, text: &str) -> Self {
        SentenceTemplate {
            kind,
            text: text.to_string(),
        }
    }

    fn fill(&self, slots: &[(&str, &str)]) -> String {
        let mut s = self.text.clone();
        for (k, v) in slots {
            s = s.replace(&format!("{{{k}}}"), v);
        }
        s
    }

    fn check_slots(&self) -> Result<()> {
        let needed: &[&str] = match self.kind {
            TemplateKind::Single => &["{a}", "{o}"],
            TemplateKind::SharedOpinion => &["{a1}", "{a2}", "{o}"],
            TemplateKind::Contrastive => &["{a1}", "{o1}", "{a2}", "{o2}"],
        };
        match needed.iter().find(|slot| !self.text.contains(*slot)) {
            Some(slot) => Err(Error::Data(format!(
                "{:?} template `{}` lacks slot {slot}",
                self.kind, self.text
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainLexicon {
    pub tag: String,
    pub aspects: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct OpinionLexicon {
    pub positive: Vec<String>,
    pub negative: Vec<String>,
    pub neutral: Vec<String>,
}

impl OpinionLexicon {
    pub fn words(&self, p: Polarity) -> &[String] {
        match p {
            Polarity::Positive => &self.positive,
            Polarity::Negative => &self.negative,
            Polarity::Neutral => &self.neutral,
        }
    }

    fn available(&self) -> Vec<Polarity> {
        Polarity::ALL.into_iter().filter(|&p| !self.words(p).is_empty()).collect()
    }
}

/// Everything needed to generate a corpus deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub domains: Vec<DomainLexicon>,
    pub opinions: OpinionLexicon,
    pub templates: Vec<SentenceTemplate>,
    /// Samples generated per domain.
    pub per_domain: usize,
    /// Share of samples that come from contrastive sentences.
    pub contrastive_fraction: f64,
    /// Share of sentences routed to the test split by [`split_domains`].
    pub test_fraction: f64,
    pub seed: u64,
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl Default for CorpusSpec {
    fn default() -> Self {
        use TemplateKind::*;
        CorpusSpec {
            domains: vec![
                DomainLexicon {
                    tag: "restaurant".into(),
                    aspects: words(&[
                        "food", "pasta", "pizza", "sushi", "dessert", "wine list", "waiter", "ambience", "menu",
                        "portions", "decor", "staff", "price", "bread", "music",
                    ]),
                },
                DomainLexicon {
                    tag: "laptop".into(),
                    aspects: words(&[
                        "keyboard", "battery life", "screen", "trackpad", "hard drive", "processor", "fan",
                        "speakers", "price", "charger", "hinge", "webcam", "memory", "graphics card", "ports",
                    ]),
                },
                DomainLexicon {
                    tag: "device".into(),
                    aspects: words(&[
                        "camera", "battery", "headphones", "lens", "flash", "zoom", "display", "buttons",
                        "software", "case", "signal", "sound quality", "price", "menu", "charger",
                    ]),
                },
                DomainLexicon {
                    tag: "service".into(),
                    aspects: words(&[
                        "support team", "website", "delivery", "refund", "checkout", "account", "agent",
                        "hosting", "interface", "billing", "staff", "price", "response time", "app", "setup",
                    ]),
                },
            ],
            opinions: OpinionLexicon {
                positive: words(&[
                    "great", "excellent", "amazing", "superb", "fantastic", "wonderful", "lovely", "perfect",
                    "impressive", "reliable",
                ]),
                negative: words(&[
                    "terrible", "awful", "horrible", "poor", "disappointing", "bad", "dreadful", "lousy", "slow",
                    "useless",
                ]),
                neutral: words(&[
                    "okay", "average", "standard", "ordinary", "typical", "unremarkable", "adequate", "normal",
                ]),
            },
            templates: vec![
                SentenceTemplate::new(Single, "the {a} was {o}"),
                SentenceTemplate::new(Single, "i thought the {a} was {o}"),
                SentenceTemplate::new(Single, "honestly , the {a} is {o}"),
                SentenceTemplate::new(Single, "we found the {a} {o}"),
                SentenceTemplate::new(SharedOpinion, "the {a1} and the {a2} were {o}"),
                SentenceTemplate::new(SharedOpinion, "both the {a1} and the {a2} seemed {o}"),
                SentenceTemplate::new(Contrastive, "the {a1} was {o1} but the {a2} was {o2}"),
                SentenceTemplate::new(Contrastive, "although the {a1} was {o1} , the {a2} was {o2}"),
                SentenceTemplate::new(Contrastive, "the {a1} is {o1} , however the {a2} is {o2}"),
                SentenceTemplate::new(Contrastive, "i found the {a1} {o1} and the {a2} {o2}"),
            ],
            per_domain: 1200,
            contrastive_fraction: 0.6,
            test_fraction: 0.25,
            seed: 1,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::Data("corpus spec has no domains".into()));
        }
        if self.per_domain == 0 {
            return Err(Error::Data("per_domain must be positive".into()));
        }
        let mut tags = HashSet::new();
        for d in &self.domains {
            if !tags.insert(d.tag.as_str()) {
                return Err(Error::Data(format!("duplicate domain tag `{}`", d.tag)));
            }
            if d.aspects.is_empty() {
                return Err(Error::Data(format!("domain `{}` has an empty aspect lexicon", d.tag)));
            }
        }
        if !(0.0..=1.0).contains(&self.contrastive_fraction) || !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Data("fractions must lie in [0, 1]".into()));
        }
        for t in &self.templates {
            t.check_slots()?;
        }
        let has = |k: TemplateKind| self.templates.iter().any(|t| t.kind == k);
        let polarities = self.opinions.available();
        if polarities.is_empty() {
            return Err(Error::Data("opinion lexicon is empty".into()));
        }
        if self.contrastive_fraction > 0.0 {
            if !has(TemplateKind::Contrastive) {
                return Err(Error::Data("contrastive fraction > 0 but no contrastive template".into()));
            }
            if polarities.len() < 2 {
                return Err(Error::Data("contrastive templates need opinions of two polarities".into()));
            }
            if let Some(d) = self.domains.iter().find(|d| disjoint_pairs(&d.aspects).is_empty()) {
                return Err(Error::Data(format!(
                    "contrastive templates need two word-disjoint aspects in domain `{}`",
                    d.tag
                )));
            }
        }
        if self.contrastive_fraction < 1.0 && !has(TemplateKind::Single) && !has(TemplateKind::SharedOpinion) {
            return Err(Error::Data("non-contrastive share > 0 but no single/shared template".into()));
        }
        if has(TemplateKind::SharedOpinion) && self.contrastive_fraction < 1.0 {
            if let Some(d) = self.domains.iter().find(|d| disjoint_pairs(&d.aspects).is_empty()) {
                if !has(TemplateKind::Single) {
                    return Err(Error::Data(format!("domain `{}` cannot fill two-aspect templates", d.tag)));
                }
            }
        }
        Ok(())
    }

    /// Share of each domain's aspect words that appear in no other domain.
    pub fn domain_uniqueness(&self) -> Vec<(String, f64)> {
        self.domains
            .iter()
            .map(|d| {
                let others: HashSet<&str> = self
                    .domains
                    .iter()
                    .filter(|o| o.tag != d.tag)
                    .flat_map(|o| o.aspects.iter().map(String::as_str))
                    .collect();
                let unique = d.aspects.iter().filter(|a| !others.contains(a.as_str())).count();
                (d.tag.clone(), unique as f64 / d.aspects.len() as f64)
            })
            .collect()
    }
}

/// Index pairs of aspects that share no word (so each is located unambiguously).
fn disjoint_pairs(aspects: &[String]) -> Vec<(usize, usize)> {
    let toks: Vec<HashSet<String>> = aspects.iter().map(|a| tokenize(a).into_iter().collect()).collect();
    let mut out = Vec::new();
    for i in 0..aspects.len() {
        for j in 0..aspects.len() {
            if i != j && toks[i].is_disjoint(&toks[j]) {
                out.push((i, j));
            }
        }
    }
    out
}

#[derive(Clone, Copy)]
enum Group {
    Contrastive,
    Plain,
}

/// Generates the whole corpus, domain by domain.
///
/// Contrastive sentences contribute both of their aspects as samples with
/// different labels, so the sentence alone never determines the label.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.per_domain * spec.domains.len());
    for (di, domain) in spec.domains.iter().enumerate() {
        out.extend(generate_domain(spec, di as u64, domain)?);
    }
    Ok(out)
}

fn generate_domain(spec: &CorpusSpec, index: u64, domain: &DomainLexicon) -> Result<Vec<Sample>> {
    const MAX_ATTEMPTS: usize = 64;
    let mut rng = RngStream::derive(Purpose::DataGen, spec.seed, index);
    let n = spec.per_domain;
    let pairs = ((n as f64 * spec.contrastive_fraction) / 2.0).round() as usize;
    let pairs = pairs.min(n / 2);
    let plain = n - 2 * pairs;
    let mut plan: Vec<Group> = std::iter::repeat_n(Group::Contrastive, pairs)
        .chain(std::iter::repeat_n(Group::Plain, plain))
        .collect();
    rng.shuffle(&mut plan);

    let by_kind = |k: TemplateKind| -> Vec<&SentenceTemplate> { spec.templates.iter().filter(|t| t.kind == k).collect() };
    let contrastive_t = by_kind(TemplateKind::Contrastive);
    let single_t = by_kind(TemplateKind::Single);
    let shared_t = by_kind(TemplateKind::SharedOpinion);
    let plain_t: Vec<&SentenceTemplate> = single_t.iter().chain(shared_t.iter()).copied().collect();
    let polarities = spec.opinions.available();
    let pair_cycle: Vec<(Polarity, Polarity)> = [
        (Polarity::Positive, Polarity::Negative),
        (Polarity::Negative, Polarity::Neutral),
        (Polarity::Neutral, Polarity::Positive),
    ]
    .into_iter()
    .filter(|(a, b)| polarities.contains(a) && polarities.contains(b))
    .collect();
    let disjoint = disjoint_pairs(&domain.aspects);

    let mut seen: HashSet<String> = HashSet::new();
    let mut samples = Vec::with_capacity(n);
    let mut polarity_counter = 0usize;
    let mut pair_counter = 0usize;
    let mut produced_plain = 0usize;
    let mut remaining_plain = plain;

    let make = |sentence: &str, aspect: &str, polarity: Polarity| Sample {
        sentence: sentence.to_string(),
        aspect: aspect.to_string(),
        polarity,
        domain: domain.tag.clone(),
    };

    for group in plan {
        match group {
            Group::Contrastive => {
                let (p1, p2) = pair_cycle[pair_counter % pair_cycle.len()];
                pair_counter += 1;
                let (p1, p2) = if rng.below(2) == 0 { (p1, p2) } else { (p2, p1) };
                let mut sentence = String::new();
                let mut chosen = (0, 0);
                for attempt in 0..MAX_ATTEMPTS {
                    let t = contrastive_t[rng.below(contrastive_t.len())];
                    chosen = disjoint[rng.below(disjoint.len())];
                    let o1 = rng.choose(spec.opinions.words(p1)).expect("validated");
                    let o2 = rng.choose(spec.opinions.words(p2)).expect("validated");
                    sentence = t.fill(&[
                        ("a1", &domain.aspects[chosen.0]),
                        ("o1", o1),
                        ("a2", &domain.aspects[chosen.1]),
                        ("o2", o2),
                    ]);
                    if seen.insert(sentence.clone()) || attempt + 1 == MAX_ATTEMPTS {
                        break;
                    }
                }
                samples.push(make(&sentence, &domain.aspects[chosen.0], p1));
                samples.push(make(&sentence, &domain.aspects[chosen.1], p2));
            }
            Group::Plain => {
                if produced_plain >= plain {
                    continue;
                }
                let p = polarities[polarity_counter % polarities.len()];
                polarity_counter += 1;
                let mut emitted: Vec<Sample> = Vec::new();
                for attempt in 0..MAX_ATTEMPTS {
                    emitted.clear();
                    let t = plain_t[rng.below(plain_t.len())];
                    let o = rng.choose(spec.opinions.words(p)).expect("validated");
                    let sentence;
                    if t.kind == TemplateKind::SharedOpinion && !disjoint.is_empty() {
                        let (i, j) = disjoint[rng.below(disjoint.len())];
                        sentence = t.fill(&[("a1", &domain.aspects[i]), ("a2", &domain.aspects[j]), ("o", o)]);
                        emitted.push(make(&sentence, &domain.aspects[i], p));
                        if remaining_plain >= 2 {
                            emitted.push(make(&sentence, &domain.aspects[j], p));
                        }
                    } else {
                        let t = if t.kind == TemplateKind::Single {
                            t
                        } else {
                            single_t[rng.below(single_t.len())]
                        };
                        let a = rng.choose(&domain.aspects).expect("validated");
                        sentence = t.fill(&[("a", a), ("o", o)]);
                        emitted.push(make(&sentence, a, p));
                    }
                    if seen.insert(sentence) || attempt + 1 == MAX_ATTEMPTS {
                        break;
                    }
                }
                produced_plain += emitted.len();
                remaining_plain -= emitted.len();
                samples.append(&mut emitted);
            }
        }
    }
    // Shared-opinion sentences emit two samples per plan slot; top up any
    // shortfall caused by plan slots skipped above.
    while samples.len() < n && !single_t.is_empty() {
        let p = polarities[polarity_counter % polarities.len()];
        polarity_counter += 1;
        let t = single_t[rng.below(single_t.len())];
        let a = rng.choose(&domain.aspects).expect("validated");
        let o = rng.choose(spec.opinions.words(p)).expect("validated");
        samples.push(make(&t.fill(&[("a", a), ("o", o)]), a, p));
    }
    Ok(samples)
}

/// Whether a sample belongs to the test split. Depends only on the sentence,
/// so both samples of a contrastive sentence always land together.
pub fn is_test_sample(sample: &Sample, test_fraction: f64) -> bool {
    let h = splitmix64(fnv1a(sample.sentence.as_bytes()));
    ((h >> 11) as f64 / (1u64 << 53) as f64) < test_fraction
}

/// Marks samples whose sentence occurs in the corpus with more than one label.
pub fn contrastive_mask(samples: &[Sample]) -> Vec<bool> {
    let mut labels: HashMap<&str, HashSet<Polarity>> = HashMap::new();
    for s in samples {
        labels.entry(s.sentence.as_str()).or_default().insert(s.polarity);
    }
    samples.iter().map(|s| labels[s.sentence.as_str()].len() > 1).collect()
}

/// Resolves a domain name or its unambiguous one-letter abbreviation.
pub fn resolve_domain(tag: &str, corpus: &[Sample]) -> Result<String> {
    let tags: Vec<&str> = {
        let mut set: Vec<&str> = corpus.iter().map(|s| s.domain.as_str()).collect();
        set.sort_unstable();
        set.dedup();
        set
    };
    if tags.contains(&tag) {
        return Ok(tag.to_string());
    }
    let lower = tag.to_lowercase();
    let matches: Vec<&&str> = tags.iter().filter(|t| lower.len() == 1 && t.starts_with(&lower)).collect();
    match matches.as_slice() {
        [one] => Ok(one.to_string()),
        _ => Err(Error::Data(format!("unknown domain `{tag}` (available: {})", tags.join(", ")))),
    }
}

#[derive(Debug, Clone)]
pub struct DomainSplit {
    pub source: String,
    pub target: String,
    pub train: Vec<Sample>,
    pub in_test: Vec<Sample>,
    pub out_test: Vec<Sample>,
}

impl DomainSplit {
    /// Source and target are the same domain.
    pub fn is_in_domain(&self) -> bool {
        self.source == self.target
    }
}

/// Train and test sets for training on `in_domain` and testing on both the
/// in-domain test split and `out_domain`'s test split.
pub fn split_domains(corpus: &[Sample], in_domain: &str, out_domain: &str, test_fraction: f64) -> Result<DomainSplit> {
    let source = resolve_domain(in_domain, corpus)?;
    let target = resolve_domain(out_domain, corpus)?;
    let mut train = Vec::new();
    let mut in_test = Vec::new();
    let mut out_test = Vec::new();
    for s in corpus {
        let test = is_test_sample(s, test_fraction);
        if s.domain == source {
            if test {
                in_test.push(s.clone());
            } else {
                train.push(s.clone());
            }
        }
        if s.domain == target && test {
            out_test.push(s.clone());
        }
    }
    Ok(DomainSplit {
        source,
        target,
        train,
        in_test,
        out_test,
    })
}

/// Per-domain sample counts, sorted by tag.
pub fn domain_counts(corpus: &[Sample]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for s in corpus {
        *m.entry(s.domain.clone()).or_insert(0) += 1;
    }
    m
}

pub fn write_corpus(path: &Path, samples: &[Sample]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: &Path) -> Result<Vec<Sample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(s);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{} holds no samples", path.display())));
    }
    Ok(out)
}
