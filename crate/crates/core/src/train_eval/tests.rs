// SPDX-License-Identifier: MIT OR Apache-2.0

use super::*;
use crate::autodiff::finite_difference_check;
use crate::data::Polarity;
use crate::editing::{init_edit_suite, PositionPolicy};
use crate::model::ModelConfig;

fn config(vocab: usize, d: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: d,
        d_ff: 2 * d,
        vocab_size: vocab,
        max_seq: 16,
        norm_eps: 1e-5,
        init_seed: 1,
    }
}

fn prompt(ids: Vec<usize>, aspect: Vec<usize>, gold: Polarity, id: u64) -> PromptRendering {
    let verbalizer = [2, 3, 4];
    PromptRendering {
        ids,
        aspect_positions: aspect,
        gold: verbalizer[Polarity::ALL.iter().position(|&p| p == gold).unwrap()],
        polarity: gold,
        verbalizer,
        sample_id: id,
        template_id: "t".into(),
    }
}

/// Toy task: the label depends on which of two marked tokens the aspect is.
fn toy_set() -> Vec<PromptRendering> {
    let mut out = Vec::new();
    for k in 0..24u64 {
        let a = 5 + (k % 4) as usize;
        let (gold, asp) = if k % 2 == 0 { (Polarity::Positive, 1) } else { (Polarity::Negative, 3) };
        out.push(prompt(vec![a, 9, 10, 11, 12, a], vec![asp], gold, k));
    }
    out
}

#[test]
fn uniform_logits_give_log_vocab() {
    let mut model: Model<f64> = Model::init(config(20, 8)).unwrap();
    model.params.unembed = Tensor::zeros(vec![8, 20]);
    let suite = init_edit_suite(&model.config, &[1], 1, 1, PositionPolicy::Aspect, 0).unwrap();
    let loss = edit_loss(&model, &suite, &toy_set()[..3]).unwrap();
    assert!((loss - (20f64).ln()).abs() < 1e-12);
    assert!(edit_loss(&model, &suite, &[]).is_err());
}

#[test]
fn edit_gradients_match_finite_differences() {
    let model: Model<f64> = Model::init(config(24, 8)).unwrap();
    let mut suite = init_edit_suite(&model.config, &[1, 2], 2, 2, PositionPolicy::Aspect, 3).unwrap();
    // move away from the identity point so every term is exercised
    let mut rng = RngStream::new(Purpose::Init, 77);
    for t in suite.tensors_mut() {
        let noise: Tensor<f64> = rng.gaussian(t.shape(), 0.0, 0.3).unwrap();
        *t = t.add(&noise).unwrap();
    }
    let data = toy_set();
    let batch: Vec<(&PromptRendering, &[usize])> = data[..3].iter().map(|p| (p, p.aspect_positions.as_slice())).collect();
    let layers = suite.meta.layers.clone();
    let params: Vec<Tensor<f64>> = suite.tensors().into_iter().cloned().collect();
    let err = finite_difference_check(
        |tape, vars| {
            let edits = edit_vars_from(&layers, vars)?;
            edit_loss_on_tape(tape, &model, &edits, &batch)
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-5, "relative error {err}");
}

#[test]
fn zero_rates_change_nothing() {
    let model: Model<f32> = Model::init(config(20, 8)).unwrap();
    let before = model.params.checksum();
    let mut suite = init_edit_suite(&model.config, &[1, 2], 2, 2, PositionPolicy::Aspect, 0).unwrap();
    let init = suite.clone();
    let cfg = TrainConfig {
        lr_w: 0.0,
        lr_rep: 0.0,
        ..TrainConfig::default()
    };
    train_edits(&model, &mut suite, &toy_set(), &cfg, |_| {}).unwrap();
    assert_eq!(suite, init);
    assert_eq!(model.params.checksum(), before);
}

#[test]
fn training_learns_keeps_orthonormality_and_is_reproducible() {
    let model: Model<f64> = Model::init(config(20, 16)).unwrap();
    let data = toy_set();
    let cfg = TrainConfig {
        lr_w: 1e-2,
        lr_rep: 1e-2,
        epochs: 15,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let run = || {
        let mut suite = init_edit_suite(&model.config, &[1, 2], 2, 2, PositionPolicy::Aspect, 4).unwrap();
        let mut worst = 0.0f64;
        let mut steps = 0;
        let m = train_edits(&model, &mut suite, &data, &cfg, |s| {
            worst = worst.max(s.orthonormality_error);
            steps += 1;
        })
        .unwrap();
        (suite, m, worst, steps)
    };
    let before = model.params.checksum();
    let (suite, m, worst, steps) = run();
    assert_eq!(model.params.checksum(), before);
    assert_eq!(steps, 15 * 3);
    assert!(worst <= 1e-10, "{worst}");
    let first: f64 = m.loss_curve[..3].iter().sum();
    let last: f64 = m.loss_curve[m.loss_curve.len() - 3..].iter().sum();
    assert!(last < first, "{:?}", m.loss_curve);
    let base = evaluate_accuracy(&model, None, &data).unwrap();
    assert!(m.accuracy > base.accuracy);

    let (suite2, m2, _, _) = run();
    assert_eq!(suite, suite2);
    assert_eq!(m.loss_curve, m2.loss_curve);
    assert_eq!(m.accuracy, m2.accuracy);
}

#[test]
fn identity_suite_leaves_accuracy_unchanged() {
    let model: Model<f32> = Model::init(config(20, 8)).unwrap();
    let data = toy_set();
    let suite = init_edit_suite(&model.config, &[1, 2], 2, 2, PositionPolicy::Last, 0).unwrap();
    let a = evaluate_accuracy(&model, None, &data).unwrap();
    let b = evaluate_accuracy(&model, Some(&suite), &data).unwrap();
    assert_eq!(a.accuracy, b.accuracy);
    assert!((a.mean_loss - b.mean_loss).abs() < 1e-6);
    assert!(evaluate_accuracy(&model, None, &[]).is_err());
    assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
}
