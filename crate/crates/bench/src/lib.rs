// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shared fixtures for the benchmarks.

use tracedit_core::data::{build_vocab, generate_corpus, render_all, CorpusSpec, PromptRendering, PromptTemplate, Vocab};
use tracedit_core::model::{Model, ModelConfig};

/// Desk-scale model (untrained) with a small rendered prompt set.
pub fn fixture() -> (Model<f32>, Vocab, Vec<PromptRendering>) {
    let spec = CorpusSpec {
        per_domain: 40,
        ..CorpusSpec::default()
    };
    let corpus = generate_corpus(&spec).expect("default corpus spec is valid");
    let template = PromptTemplate::default();
    let vocab = build_vocab(&corpus, &template, None).expect("vocabulary");
    let config = ModelConfig::desk_scale(vocab.len());
    let prompts = render_all(&corpus, &vocab, &template, config.max_seq).expect("prompts render");
    let model = Model::init(config).expect("desk-scale config is valid");
    (model, vocab, prompts)
}
