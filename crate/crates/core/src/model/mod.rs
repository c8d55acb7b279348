// SPDX-License-Identifier: MIT OR Apache-2.0

//! A small pre-norm decoder-only transformer with hook points on every
//! residual-stream state.
//!
//! Hidden state `h^(0)` is the embedding output and `h^(l)` the output of
//! block `l`, for `l` in `1..=L`. Positions are 0-based.

mod checkpoint;
mod train;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_model, save_model, Checkpoint, CheckpointTensor, ModelCheckpoint, CHECKPOINT_FORMAT};
pub use train::{label_accuracy, train_base, train_base_observed, BaseTrainConfig, BaseTrainReport};

use crate::autodiff::{ParamId, Tape, Var};
use crate::editing::{EditSuite, EditVars};
use crate::error::{Error, Result};
use crate::rng::{Purpose, RngStream};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub norm_eps: f64,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Default experiment size for a single CPU core.
    pub fn desk_scale(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 8,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            vocab_size,
            max_seq: 64,
            norm_eps: 1e-5,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::invalid("model config", detail));
        if self.n_layers < 2 {
            return bad(format!("n_layers = {} (need >= 2)", self.n_layers));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.d_ff == 0 || self.vocab_size < 2 || self.max_seq == 0 {
            return bad("d_ff, vocab_size and max_seq must be positive".into());
        }
        if !(self.norm_eps > 0.0) {
            return bad(format!("norm_eps = {}", self.norm_eps));
        }
        Ok(())
    }

    /// Number of scalar parameters in [`BaseParams`].
    pub fn param_count(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        let block = 2 * d + 4 * d * d + 2 * d * f;
        2 * self.vocab_size * d + self.max_seq * d + self.n_layers * block + d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<F> {
    pub ln1: Tensor<F>,
    pub wq: Tensor<F>,
    pub wk: Tensor<F>,
    pub wv: Tensor<F>,
    /// Attention output projection, `[d, d]`, applied as `x · wo`.
    pub wo: Tensor<F>,
    pub ln2: Tensor<F>,
    pub w1: Tensor<F>,
    pub w2: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseParams<F> {
    pub tok_emb: Tensor<F>,
    pub pos_emb: Tensor<F>,
    pub blocks: Vec<BlockParams<F>>,
    pub ln_f: Tensor<F>,
    pub unembed: Tensor<F>,
}

const BLOCK_FIELDS: [&str; 8] = ["ln1", "wq", "wk", "wv", "wo", "ln2", "w1", "w2"];

impl<F: Scalar> BaseParams<F> {
    /// Named tensors in canonical order; block indices are 1-based.
    pub fn named(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (l, b) in self.blocks.iter().enumerate() {
            let fields = [&b.ln1, &b.wq, &b.wk, &b.wv, &b.wo, &b.ln2, &b.w1, &b.w2];
            for (name, t) in BLOCK_FIELDS.iter().zip(fields) {
                out.push((format!("blocks.{}.{name}", l + 1), t));
            }
        }
        out.push(("ln_f".to_string(), &self.ln_f));
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    /// Mutable views in the order of [`BaseParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend([&mut b.ln1, &mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo, &mut b.ln2, &mut b.w1, &mut b.w2]);
        }
        out.push(&mut self.ln_f);
        out.push(&mut self.unembed);
        out
    }

    /// Rebuilds parameters from named tensors, checking every shape.
    pub fn from_named(config: &ModelConfig, mut named: BTreeMap<String, Tensor<F>>) -> Result<Self> {
        let mut ordered = Vec::new();
        for (name, shape) in expected_shapes(config) {
            let t = named
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!("tensor `{name}` has shape {:?}, expected {shape:?}", t.shape())));
            }
            ordered.push(t);
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        let mut it = ordered.into_iter();
        let mut next = || it.next().expect("one tensor per expected shape");
        let tok_emb = next();
        let pos_emb = next();
        let blocks = (0..config.n_layers)
            .map(|_| BlockParams {
                ln1: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                ln2: next(),
                w1: next(),
                w2: next(),
            })
            .collect();
        Ok(BaseParams {
            tok_emb,
            pos_emb,
            blocks,
            ln_f: next(),
            unembed: next(),
        })
    }

    /// FNV-1a over every parameter's bytes; used to verify the base stays frozen.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for (_, t) in self.named() {
            for &x in t.data() {
                x.write_le(&mut bytes);
            }
        }
        crate::rng::fnv1a(&bytes)
    }

    pub fn cast<G: Scalar>(&self) -> BaseParams<G> {
        BaseParams {
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    ln1: b.ln1.cast(),
                    wq: b.wq.cast(),
                    wk: b.wk.cast(),
                    wv: b.wv.cast(),
                    wo: b.wo.cast(),
                    ln2: b.ln2.cast(),
                    w1: b.w1.cast(),
                    w2: b.w2.cast(),
                })
                .collect(),
            ln_f: self.ln_f.cast(),
            unembed: self.unembed.cast(),
        }
    }
}

fn expected_shapes(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f) = (c.d_model, c.d_ff);
    let mut out = vec![
        ("tok_emb".to_string(), vec![c.vocab_size, d]),
        ("pos_emb".to_string(), vec![c.max_seq, d]),
    ];
    for l in 1..=c.n_layers {
        let shapes = [vec![d], vec![d, d], vec![d, d], vec![d, d], vec![d, d], vec![d], vec![d, f], vec![f, d]];
        for (name, s) in BLOCK_FIELDS.iter().zip(shapes) {
            out.push((format!("blocks.{l}.{name}"), s));
        }
    }
    out.push(("ln_f".to_string(), vec![d]));
    out.push(("unembed".to_string(), vec![d, c.vocab_size]));
    out
}

/// Standard deviation of freshly initialized embeddings.
pub const EMBED_INIT_STD: f64 = 0.1;

/// Seeded initialization: Gaussian weights scaled by fan-in, residual
/// output projections further scaled by `1/sqrt(2L)`, unit norm gains.
pub fn init_model<F: Scalar>(config: &ModelConfig) -> Result<BaseParams<F>> {
    config.validate()?;
    let mut rng = RngStream::new(Purpose::Init, config.init_seed);
    let (d, f) = (config.d_model, config.d_ff);
    let proj = 1.0 / (d as f64).sqrt();
    let resid = proj / (2.0 * config.n_layers as f64).sqrt();
    let tok_emb = rng.gaussian(&[config.vocab_size, d], 0.0, EMBED_INIT_STD)?;
    let pos_emb = rng.gaussian(&[config.max_seq, d], 0.0, EMBED_INIT_STD)?;
    let mut blocks = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        blocks.push(BlockParams {
            ln1: Tensor::full(vec![d], F::one()),
            wq: rng.gaussian(&[d, d], 0.0, proj)?,
            wk: rng.gaussian(&[d, d], 0.0, proj)?,
            wv: rng.gaussian(&[d, d], 0.0, proj)?,
            wo: rng.gaussian(&[d, d], 0.0, resid)?,
            ln2: Tensor::full(vec![d], F::one()),
            w1: rng.gaussian(&[d, f], 0.0, proj)?,
            w2: rng.gaussian(&[f, d], 0.0, 1.0 / (f as f64).sqrt() / (2.0 * config.n_layers as f64).sqrt())?,
        });
    }
    Ok(BaseParams {
        tok_emb,
        pos_emb,
        blocks,
        ln_f: Tensor::full(vec![d], F::one()),
        unembed: rng.gaussian(&[d, config.vocab_size], 0.0, proj)?,
    })
}

/// A model: configuration plus base parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: BaseParams<F>,
}

/// Base weights placed on a tape.
#[derive(Debug, Clone)]
pub struct WeightVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub blocks: Vec<[Var; 8]>,
    pub ln_f: Var,
    pub unembed: Var,
}

/// Gaussian corruption already drawn: one row per corrupted position.
#[derive(Debug, Clone)]
pub struct Noise<F> {
    pub positions: Vec<usize>,
    pub values: Tensor<F>,
}

/// Overwrites `h^(layer)` at `position` with `value`.
#[derive(Debug, Clone)]
pub struct Patch<F> {
    pub layer: usize,
    pub position: usize,
    pub value: Vec<F>,
}

/// Which positions get logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Readout {
    Last,
    All,
}

/// Edit suite together with the prompt positions its representation edit targets.
#[derive(Debug, Clone, Copy)]
pub struct AttachedEdits<'a, F> {
    pub suite: &'a EditSuite<F>,
    pub rows: &'a [usize],
}

#[derive(Debug, Clone)]
pub struct ForwardOptions<'a, F> {
    pub record_hidden: bool,
    pub noise: Option<&'a Noise<F>>,
    pub restore: &'a [Patch<F>],
    pub edits: Option<AttachedEdits<'a, F>>,
    pub readout: Readout,
}

impl<F> Default for ForwardOptions<'_, F> {
    fn default() -> Self {
        ForwardOptions {
            record_hidden: false,
            noise: None,
            restore: &[],
            edits: None,
            readout: Readout::Last,
        }
    }
}

/// Every residual-stream state of one forward pass: `states[l]` is `[T, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenCache<F> {
    pub states: Vec<Tensor<F>>,
}

impl<F: Scalar> HiddenCache<F> {
    pub fn n_layers(&self) -> usize {
        self.states.len() - 1
    }

    pub fn len(&self) -> usize {
        self.states[0].rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, layer: usize, position: usize) -> &[F] {
        self.states[layer].row(position)
    }

    pub fn patch(&self, layer: usize, position: usize) -> Patch<F> {
        Patch {
            layer,
            position,
            value: self.get(layer, position).to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<F> {
    /// `[1, V]` for [`Readout::Last`], `[T, V]` for [`Readout::All`].
    pub logits: Tensor<F>,
    pub cache: Option<HiddenCache<F>>,
}

impl<F: Scalar> ForwardOutput<F> {
    pub fn last_logits(&self) -> &[F] {
        self.logits.row(self.logits.rows() - 1)
    }
}

/// Tape-level forward products.
#[derive(Debug, Clone)]
pub struct TapeForward {
    pub hidden: Vec<Var>,
    pub logits: Var,
}

impl<F: Scalar> Model<F> {
    pub fn new(config: ModelConfig, params: BaseParams<F>) -> Result<Self> {
        config.validate()?;
        let named: BTreeMap<String, Tensor<F>> = params.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
        BaseParams::from_named(&config, named)?;
        Ok(Model { config, params })
    }

    pub fn init(config: ModelConfig) -> Result<Self> {
        Ok(Model {
            params: init_model(&config)?,
            config,
        })
    }

    /// Places the base weights on `tape`: as trainable leaves numbered in
    /// [`BaseParams::named`] order, or as constants.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> WeightVars {
        let mut next = 0usize;
        let mut put = |tape: &mut Tape<F>, t: &Tensor<F>| {
            let v = if trainable {
                tape.param(ParamId(next), t.clone())
            } else {
                tape.constant(t.clone())
            };
            next += 1;
            v
        };
        let p = &self.params;
        let tok_emb = put(tape, &p.tok_emb);
        let pos_emb = put(tape, &p.pos_emb);
        let blocks = p
            .blocks
            .iter()
            .map(|b| {
                [&b.ln1, &b.wq, &b.wk, &b.wv, &b.wo, &b.ln2, &b.w1, &b.w2].map(|t| put(tape, t))
            })
            .collect();
        let ln_f = put(tape, &p.ln_f);
        let unembed = put(tape, &p.unembed);
        WeightVars {
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            unembed,
        }
    }

    fn check_tokens(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() || ids.len() > self.config.max_seq {
            return Err(Error::invalid(
                "prompt length",
                format!("{} tokens (allowed 1..={})", ids.len(), self.config.max_seq),
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::invalid("token id", format!("{bad} >= vocab size {}", self.config.vocab_size)));
        }
        Ok(())
    }

    fn check_patches(&self, t: usize, patches: &[Patch<F>]) -> Result<()> {
        for p in patches {
            if p.layer > self.config.n_layers || p.position >= t || p.value.len() != self.config.d_model {
                return Err(Error::invalid(
                    "restore patch",
                    format!(
                        "layer {} position {} width {} outside {}x{}x{}",
                        p.layer,
                        p.position,
                        p.value.len(),
                        self.config.n_layers + 1,
                        t,
                        self.config.d_model
                    ),
                ));
            }
        }
        Ok(())
    }

    /// `h^(0)`: token plus position embeddings.
    pub fn embed_on_tape(&self, tape: &mut Tape<F>, w: &WeightVars, ids: &[usize]) -> Result<Var> {
        self.check_tokens(ids)?;
        let tok = tape.gather(w.tok_emb, ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = tape.gather(w.pos_emb, &positions)?;
        tape.add(tok, pos)
    }

    /// One pre-norm block: `h + attn(norm(h))`, then `+ mlp(norm(.))`,
    /// followed by the representation edit when this layer is edited.
    /// `layer` is 1-based.
    pub fn block_on_tape(
        &self,
        tape: &mut Tape<F>,
        w: &WeightVars,
        h: Var,
        layer: usize,
        edit: Option<(&EditVars, &[usize])>,
    ) -> Result<Var> {
        if layer == 0 || layer > self.config.n_layers {
            return Err(Error::invalid("layer index", format!("{layer} outside 1..={}", self.config.n_layers)));
        }
        let [ln1, wq, wk, wv, wo, ln2, w1, w2] = w.blocks[layer - 1];
        let eps = F::lit(self.config.norm_eps);
        let x = tape.rms_norm(h, ln1, eps)?;
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let att = tape.causal_attention(q, k, v, self.config.n_heads)?;
        let wo = match edit {
            Some((e, _)) => {
                let delta = tape.matmul(e.a, e.b)?;
                tape.add(wo, delta)?
            }
            None => wo,
        };
        let att = tape.matmul(att, wo)?;
        let h = tape.add(h, att)?;
        let x = tape.rms_norm(h, ln2, eps)?;
        let u = tape.matmul(x, w1)?;
        let u = tape.gelu(u)?;
        let m = tape.matmul(u, w2)?;
        let h = tape.add(h, m)?;
        match edit {
            Some((e, rows)) if !rows.is_empty() => crate::editing::rep_edit_on_tape(tape, h, e, rows),
            _ => Ok(h),
        }
    }

    /// Final norm and unembedding of the selected rows.
    pub fn readout_on_tape(&self, tape: &mut Tape<F>, w: &WeightVars, h: Var, readout: Readout) -> Result<Var> {
        let h = match readout {
            Readout::All => h,
            Readout::Last => {
                let t = tape.value(h).rows();
                tape.select_rows(h, &[t - 1])?
            }
        };
        let x = tape.rms_norm(h, w.ln_f, F::lit(self.config.norm_eps))?;
        tape.matmul(x, w.unembed)
    }

    /// Runs blocks `start+1..=L` from `h^(start)`, applying patches with
    /// `layer > start` and any edits, and reads out logits.
    #[allow(clippy::too_many_arguments)]
    pub fn run_from_on_tape(
        &self,
        tape: &mut Tape<F>,
        w: &WeightVars,
        start: usize,
        h_start: Var,
        restore: &[Patch<F>],
        edits: Option<(&BTreeMap<usize, EditVars>, &[usize])>,
        readout: Readout,
    ) -> Result<TapeForward> {
        let mut hidden = vec![h_start];
        let mut h = h_start;
        for layer in start + 1..=self.config.n_layers {
            let edit = edits.and_then(|(m, rows)| m.get(&layer).map(|e| (e, rows)));
            h = self.block_on_tape(tape, w, h, layer, edit)?;
            h = apply_patches(tape, h, layer, restore)?;
            hidden.push(h);
        }
        let logits = self.readout_on_tape(tape, w, h, readout)?;
        Ok(TapeForward { hidden, logits })
    }

    /// Full forward on a caller-owned tape: embed, corrupt, patch, blocks.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<F>,
        w: &WeightVars,
        ids: &[usize],
        noise: Option<&Noise<F>>,
        restore: &[Patch<F>],
        edits: Option<(&BTreeMap<usize, EditVars>, &[usize])>,
        readout: Readout,
    ) -> Result<TapeForward> {
        self.check_patches(ids.len(), restore)?;
        let mut h = self.embed_on_tape(tape, w, ids)?;
        if let Some(n) = noise {
            if n.positions.iter().any(|&p| p >= ids.len()) || n.values.shape() != [n.positions.len(), self.config.d_model] {
                return Err(Error::invalid("noise", "positions or values do not fit the prompt"));
            }
            let values = tape.constant(n.values.clone());
            h = tape.scatter_add_rows(h, &n.positions, values)?;
        }
        h = apply_patches(tape, h, 0, restore)?;
        self.run_from_on_tape(tape, w, 0, h, restore, edits, readout)
    }

    /// Inference forward on a private tape.
    pub fn forward(&self, ids: &[usize], opts: &ForwardOptions<'_, F>) -> Result<ForwardOutput<F>> {
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, false);
        let bound = match opts.edits {
            Some(e) => Some(e.suite.bind(&mut tape, self, false)?),
            None => None,
        };
        let edits = bound.as_ref().zip(opts.edits.map(|e| e.rows));
        let out = self.forward_on_tape(&mut tape, &w, ids, opts.noise, opts.restore, edits, opts.readout)?;
        Ok(self.collect(&tape, out, opts.record_hidden))
    }

    /// Inference from a given `h^(start)`; equivalent to a full forward whose
    /// states up to `start` equal `h_start`.
    pub fn forward_from(
        &self,
        start: usize,
        h_start: &Tensor<F>,
        opts: &ForwardOptions<'_, F>,
    ) -> Result<ForwardOutput<F>> {
        if start > self.config.n_layers || h_start.shape().len() != 2 || h_start.cols() != self.config.d_model {
            return Err(Error::invalid("forward_from", format!("layer {start}, state {:?}", h_start.shape())));
        }
        self.check_patches(h_start.rows(), opts.restore)?;
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, false);
        let bound = match opts.edits {
            Some(e) => Some(e.suite.bind(&mut tape, self, false)?),
            None => None,
        };
        let edits = bound.as_ref().zip(opts.edits.map(|e| e.rows));
        let h = tape.constant(h_start.clone());
        let out = self.run_from_on_tape(&mut tape, &w, start, h, opts.restore, edits, opts.readout)?;
        Ok(self.collect(&tape, out, opts.record_hidden))
    }

    fn collect(&self, tape: &Tape<F>, out: TapeForward, record: bool) -> ForwardOutput<F> {
        ForwardOutput {
            logits: tape.value(out.logits).clone(),
            cache: record.then(|| HiddenCache {
                states: out.hidden.iter().map(|&v| tape.value(v).clone()).collect(),
            }),
        }
    }
}

fn apply_patches<F: Scalar>(tape: &mut Tape<F>, h: Var, layer: usize, patches: &[Patch<F>]) -> Result<Var> {
    let here: Vec<&Patch<F>> = patches.iter().filter(|p| p.layer == layer).collect();
    if here.is_empty() {
        return Ok(h);
    }
    let rows: Vec<usize> = here.iter().map(|p| p.position).collect();
    let d = tape.value(h).cols();
    let data: Vec<F> = here.iter().flat_map(|p| p.value.iter().copied()).collect();
    let src = tape.constant(Tensor::new(vec![rows.len(), d], data)?);
    tape.overwrite_rows(h, &rows, src)
}

/// Label probabilities read from final-position logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Index into the verbalizer of the most probable label.
    pub label: usize,
    /// Softmax mass of each verbalizer token over the full vocabulary.
    pub probs: Vec<f64>,
}

/// Softmax over the full vocabulary, then argmax among the verbalizer
/// tokens; ties go to the lowest token id.
pub fn predict_polarity<F: Scalar>(logits: &[F], verbalizer: &[usize]) -> Result<Prediction> {
    if verbalizer.is_empty() {
        return Err(Error::invalid("verbalizer", "empty"));
    }
    if let Some(&bad) = verbalizer.iter().find(|&&id| id >= logits.len()) {
        return Err(Error::invalid("verbalizer", format!("token {bad} outside vocabulary of {}", logits.len())));
    }
    for (i, a) in verbalizer.iter().enumerate() {
        if verbalizer[..i].contains(a) {
            return Err(Error::invalid("verbalizer", format!("token {a} listed twice")));
        }
    }
    let row: Vec<f64> = logits.iter().map(|x| x.as_f64()).collect();
    let (p, _) = crate::autodiff::softmax_row(&row);
    let probs: Vec<f64> = verbalizer.iter().map(|&id| p[id]).collect();
    let mut best = 0;
    for i in 1..verbalizer.len() {
        let better = probs[i] > probs[best] || (probs[i] == probs[best] && verbalizer[i] < verbalizer[best]);
        if better {
            best = i;
        }
    }
    Ok(Prediction { label: best, probs })
}
