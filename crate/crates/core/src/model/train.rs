// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::{predict_polarity, ForwardOptions, Model, Readout};
use crate::autodiff::{CeTarget, ParamId, Tape};
use crate::data::PromptRendering;
use crate::error::{Error, Result};
use crate::optim::{optimizer_step, AdamWConfig, OptimizerState};
use crate::rng::{Purpose, RngStream};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Linear warm-up length in optimizer steps.
    pub warmup_steps: usize,
    /// Weight of the label token relative to each next-token target.
    pub label_weight: f64,
    pub seed: u64,
    /// Training-split label accuracy below which training reports failure.
    pub min_accuracy: f64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        BaseTrainConfig {
            epochs: 6,
            batch_size: 16,
            lr: 3e-3,
            weight_decay: 0.0,
            warmup_steps: 50,
            label_weight: 4.0,
            seed: 0,
            min_accuracy: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseTrainReport {
    /// Mean loss of each epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: u64,
    pub train_accuracy: f64,
}

/// Next-token language modelling over prompt + label: every prompt position
/// predicts the following token and the final position predicts the label.
///
/// Fails if the final label accuracy on `prompts` is below
/// `config.min_accuracy`; the model keeps its trained weights either way.
pub fn train_base<F: Scalar>(
    model: &mut Model<F>,
    prompts: &[PromptRendering],
    config: &BaseTrainConfig,
) -> Result<BaseTrainReport> {
    train_base_observed(model, prompts, config, |_, _, _| {})
}

/// [`train_base`] reporting `(epoch, mean loss, model)` after every epoch.
pub fn train_base_observed<F: Scalar>(
    model: &mut Model<F>,
    prompts: &[PromptRendering],
    config: &BaseTrainConfig,
    mut observer: impl FnMut(usize, f64, &Model<F>),
) -> Result<BaseTrainReport> {
    if prompts.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    if config.epochs == 0 || config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(Error::invalid("base training config", format!("{config:?}")));
    }
    let mut params: Vec<Tensor<F>> = model.params.named().into_iter().map(|(_, t)| t.clone()).collect();
    let mut state = OptimizerState::single(
        &params,
        AdamWConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        },
    )?;
    let mut order: Vec<usize> = (0..prompts.len()).collect();
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        RngStream::derive(Purpose::Shuffle, config.seed, epoch as u64).shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads: Vec<Tensor<F>> = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
            for &i in batch {
                let (loss, g) = sample_gradient(model, &prompts[i], config.label_weight)?;
                if !loss.is_finite() {
                    return Err(Error::Training(format!("loss diverged at epoch {}", epoch + 1)));
                }
                total += loss;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    for (a, &b) in acc.data_mut().iter_mut().zip(gi.data()) {
                        *a += b;
                    }
                }
            }
            let inv = F::one() / F::lit(batch.len() as f64);
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
            let step = state.step_count() as usize + 1;
            let warm = if config.warmup_steps == 0 {
                1.0
            } else {
                (step as f64 / config.warmup_steps as f64).min(1.0)
            };
            state.set_lr(0, config.lr * warm);
            optimizer_step(&mut params, &grads, &mut state)?;
            for (dst, src) in model.params.tensors_mut().into_iter().zip(&params) {
                *dst = src.clone();
            }
        }
        epoch_loss.push(total / prompts.len() as f64);
        observer(epoch + 1, total / prompts.len() as f64, model);
    }
    let train_accuracy = label_accuracy(model, prompts)?;
    if train_accuracy < config.min_accuracy {
        return Err(Error::Training(format!(
            "training accuracy {train_accuracy:.3} is below {:.2}; increase epochs or model size",
            config.min_accuracy
        )));
    }
    Ok(BaseTrainReport {
        epoch_loss,
        steps: state.step_count(),
        train_accuracy,
    })
}

fn sample_gradient<F: Scalar>(model: &Model<F>, p: &PromptRendering, label_weight: f64) -> Result<(f64, Vec<Tensor<F>>)> {
    let mut tape = Tape::new();
    let w = model.bind(&mut tape, true);
    let out = model.forward_on_tape(&mut tape, &w, &p.ids, None, &[], None, Readout::All)?;
    let t = p.ids.len();
    let mut targets: Vec<CeTarget<F>> = (0..t - 1)
        .map(|i| CeTarget {
            row: i,
            class: p.ids[i + 1],
            weight: F::one(),
        })
        .collect();
    targets.push(CeTarget {
        row: t - 1,
        class: p.gold,
        weight: F::lit(label_weight),
    });
    let loss = tape.cross_entropy(out.logits, &targets)?;
    let value = tape.scalar(loss).as_f64();
    let grads = tape.backward(loss)?;
    let n = model.params.named().len();
    let g = (0..n)
        .map(|i| grads.get(ParamId(i)).cloned().expect("every base weight is a parameter"))
        .collect();
    Ok((value, g))
}

/// Fraction of prompts whose predicted label is the gold label.
pub fn label_accuracy<F: Scalar>(model: &Model<F>, prompts: &[PromptRendering]) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::invalid("evaluation set", "empty"));
    }
    let mut correct = 0usize;
    for p in prompts {
        let out = model.forward(&p.ids, &ForwardOptions::default())?;
        let verbalizer = p.verbalizer;
        let pred = predict_polarity(out.last_logits(), &verbalizer)?;
        if verbalizer[pred.label] == p.gold {
            correct += 1;
        }
    }
    Ok(correct as f64 / prompts.len() as f64)
}
