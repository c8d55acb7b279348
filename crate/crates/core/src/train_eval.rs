// SPDX-License-Identifier: MIT OR Apache-2.0

//! Training an edit suite against a frozen base model, and accuracy
//! evaluation with or without edits.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{CeTarget, ParamId, Tape, Var};
use crate::data::PromptRendering;
use crate::editing::{count_params, reorthonormalize, select_positions, EditSuite, EditVars};
use crate::error::{Error, Result};
use crate::model::{predict_polarity, AttachedEdits, ForwardOptions, Model, Readout};
use crate::optim::{optimizer_step, AdamWConfig, OptimizerState};
use crate::rng::{Purpose, RngStream};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Learning rate of the weight edit (`A`, `B`).
    pub lr_w: f64,
    /// Learning rate of the representation edit (`R`, `W*`, `b`).
    pub lr_rep: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_w: 3e-4,
            lr_rep: 1e-5,
            epochs: 1,
            batch_size: 16,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Rates and length that fit an edit suite on the small experiment
    /// models within a few epochs.
    pub fn desk_scale() -> Self {
        TrainConfig {
            lr_w: 1e-2,
            lr_rep: 1e-2,
            epochs: 5,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_w >= 0.0 && self.lr_rep >= 0.0) || self.epochs == 0 || self.batch_size == 0 || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("edit training config", format!("{self:?}")));
        }
        Ok(())
    }
}

/// Reported after every optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub step: u64,
    pub loss: f64,
    pub orthonormality_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub mean_loss: f64,
    /// Mean batch loss of every optimizer step.
    pub loss_curve: Vec<f64>,
    pub trainable_fraction: f64,
    pub seed: u64,
    pub runtime_secs: f64,
}

/// Representation-edit rows for every prompt under the suite's policy.
pub fn suite_rows<F: Scalar>(suite: &EditSuite<F>, prompts: &[PromptRendering]) -> Result<Vec<Vec<usize>>> {
    prompts
        .iter()
        .map(|p| select_positions(p, suite.meta.policy, suite.meta.seed))
        .collect()
}

/// Splits a flat list of per-tensor handles (five per layer, layers
/// ascending) into per-layer edit handles.
pub fn edit_vars_from(layers: &[usize], vars: &[Var]) -> Result<BTreeMap<usize, EditVars>> {
    if vars.len() != 5 * layers.len() {
        return Err(Error::invalid("edit handles", format!("{} for {} layers", vars.len(), layers.len())));
    }
    Ok(layers
        .iter()
        .zip(vars.chunks(5))
        .map(|(&l, v)| {
            (
                l,
                EditVars {
                    a: v[0],
                    b: v[1],
                    r: v[2],
                    w_star: v[3],
                    bias: v[4],
                },
            )
        })
        .collect())
}

/// Mean negative log-probability of each prompt's gold label at its final
/// position, through the edited model, built on one tape.
pub fn edit_loss_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    model: &Model<F>,
    edits: &BTreeMap<usize, EditVars>,
    batch: &[(&PromptRendering, &[usize])],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("edit loss batch", "empty"));
    }
    let w = model.bind(tape, false);
    let mut total: Option<Var> = None;
    for (p, rows) in batch {
        if p.gold >= model.config.vocab_size {
            return Err(Error::invalid("gold label", format!("token {} outside the vocabulary", p.gold)));
        }
        let out = model.forward_on_tape(tape, &w, &p.ids, None, &[], Some((edits, rows)), Readout::Last)?;
        let ce = tape.cross_entropy(
            out.logits,
            &[CeTarget {
                row: 0,
                class: p.gold,
                weight: F::one(),
            }],
        )?;
        total = Some(match total {
            Some(t) => tape.add(t, ce)?,
            None => ce,
        });
    }
    let total = total.expect("non-empty batch");
    tape.scale(total, F::one() / F::lit(batch.len() as f64))
}

/// [`edit_loss_on_tape`] evaluated on a private tape.
pub fn edit_loss<F: Scalar>(model: &Model<F>, suite: &EditSuite<F>, batch: &[PromptRendering]) -> Result<f64> {
    let rows = suite_rows(suite, batch)?;
    let pairs: Vec<(&PromptRendering, &[usize])> = batch.iter().zip(&rows).map(|(p, r)| (p, r.as_slice())).collect();
    let mut tape = Tape::new();
    let edits = suite.bind(&mut tape, model, false)?;
    let loss = edit_loss_on_tape(&mut tape, model, &edits, &pairs)?;
    Ok(tape.scalar(loss).as_f64())
}

/// Minimizes the edit loss over `suite` only; `model` is borrowed immutably
/// and so cannot change.
///
/// Two AdamW groups carry the weight-edit and representation-edit learning
/// rates. After every step that moves an `R`, that `R` is
/// re-orthonormalized. `observer` sees every step.
pub fn train_edits<F: Scalar>(
    model: &Model<F>,
    suite: &mut EditSuite<F>,
    train: &[PromptRendering],
    config: &TrainConfig,
    mut observer: impl FnMut(&StepInfo),
) -> Result<Metrics> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    let started = Instant::now();
    let rows = suite_rows(suite, train)?;
    let mut params: Vec<Tensor<F>> = suite.tensors().into_iter().cloned().collect();
    let group = |lr: f64| AdamWConfig {
        lr,
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    };
    let mut state = OptimizerState::new(&params, vec![group(config.lr_w), group(config.lr_rep)], suite.groups())?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut loss_curve = Vec::new();
    for epoch in 0..config.epochs {
        RngStream::derive(Purpose::Shuffle, config.seed, epoch as u64).shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            let mut grads: Vec<Tensor<F>> = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let mut tape = Tape::new();
                let edits = suite.bind(&mut tape, model, true)?;
                let loss = edit_loss_on_tape(&mut tape, model, &edits, &[(&train[i], &rows[i])])?;
                batch_loss += tape.scalar(loss).as_f64();
                let g = tape.backward(loss)?;
                for (k, acc) in grads.iter_mut().enumerate() {
                    let gk = g.get(ParamId(k)).expect("every edit tensor is a parameter");
                    for (a, &b) in acc.data_mut().iter_mut().zip(gk.data()) {
                        *a += b;
                    }
                }
            }
            let inv = F::one() / F::lit(chunk.len() as f64);
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
            batch_loss /= chunk.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Training(format!("edit loss diverged at step {}", state.step_count() + 1)));
            }
            let r_before: Vec<Tensor<F>> = (0..suite.layers.len()).map(|k| params[5 * k + 2].clone()).collect();
            optimizer_step(&mut params, &grads, &mut state)?;
            for (k, before) in r_before.iter().enumerate() {
                if params[5 * k + 2] != *before {
                    params[5 * k + 2] = reorthonormalize(&params[5 * k + 2])?;
                }
            }
            for (dst, src) in suite.tensors_mut().into_iter().zip(&params) {
                *dst = src.clone();
            }
            loss_curve.push(batch_loss);
            observer(&StepInfo {
                step: state.step_count(),
                loss: batch_loss,
                orthonormality_error: suite.orthonormality_error(),
            });
        }
    }
    let eval = evaluate_accuracy(model, Some(suite), train)?;
    Ok(Metrics {
        accuracy: eval.accuracy,
        mean_loss: eval.mean_loss,
        loss_curve,
        trainable_fraction: count_params(suite, model.config.param_count()).fraction,
        seed: config.seed,
        runtime_secs: started.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Mean negative log-probability of the gold label.
    pub mean_loss: f64,
    pub n: usize,
}

/// Accuracy of argmax predictions over the verbalizer, with or without edits.
pub fn evaluate_accuracy<F: Scalar>(
    model: &Model<F>,
    suite: Option<&EditSuite<F>>,
    test: &[PromptRendering],
) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::invalid("test set", "empty"));
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for p in test {
        let rows = match suite {
            Some(s) => select_positions(p, s.meta.policy, s.meta.seed)?,
            None => Vec::new(),
        };
        let opts = ForwardOptions {
            edits: suite.map(|s| AttachedEdits { suite: s, rows: &rows }),
            ..ForwardOptions::default()
        };
        let out = model.forward(&p.ids, &opts)?;
        let pred = predict_polarity(out.last_logits(), &p.verbalizer)?;
        if p.verbalizer[pred.label] == p.gold {
            correct += 1;
        }
        let (probs, _) = crate::autodiff::softmax_row(&out.last_logits().iter().map(|x| x.as_f64()).collect::<Vec<_>>());
        loss -= probs[p.gold].max(f64::MIN_POSITIVE).ln();
    }
    Ok(Evaluation {
        accuracy: correct as f64 / test.len() as f64,
        mean_loss: loss / test.len() as f64,
        n: test.len(),
    })
}

#[cfg(test)]
mod tests;
