// SPDX-License-Identifier: MIT OR Apache-2.0

use tracedit_core::model::ForwardOptions;

#[test]
fn fixture_prompts_fit_the_model() {
    let (model, vocab, prompts) = tracedit_bench::fixture();
    assert_eq!(model.config.vocab_size, vocab.len());
    assert_eq!(prompts.len(), 160);
    let longest = prompts.iter().map(|p| p.ids.len()).max().unwrap();
    assert!(longest <= model.config.max_seq);
    let logits = model.forward(&prompts[0].ids, &ForwardOptions::default()).unwrap();
    assert_eq!(logits.last_logits().len(), vocab.len());
}
