// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hybrid edits: a low-rank update `W' = W + A·B` of each target layer's
//! attention output projection, and a representation edit
//! `α(h) = h + (W*·h + b − R·h)ᵀ R` on selected positions of the target
//! layer's output, where `R` has orthonormal rows.
//!
//! Hidden states are row vectors, so in code the edit reads
//! `h + (h·W*ᵀ + b − h·Rᵀ)·R`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, Tape, Var};
use crate::data::PromptRendering;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Model, ModelConfig};
use crate::rng::{Purpose, RngStream};
use crate::tensor::{Scalar, Tensor};

/// Which prompt positions receive the representation edit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionPolicy {
    /// Every token of the aspect span.
    Aspect,
    /// The final prompt token.
    Last,
    /// One token drawn from the middle third of the prompt.
    Mid,
}

impl PositionPolicy {
    pub const ALL: [PositionPolicy; 3] = [PositionPolicy::Aspect, PositionPolicy::Last, PositionPolicy::Mid];

    pub fn name(self) -> &'static str {
        match self {
            PositionPolicy::Aspect => "aspect",
            PositionPolicy::Last => "last",
            PositionPolicy::Mid => "mid",
        }
    }
}

impl std::str::FromStr for PositionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aspect" | "aspect-span" => Ok(PositionPolicy::Aspect),
            "last" | "last-token" => Ok(PositionPolicy::Last),
            "mid" | "random-mid" | "random-mid-token" => Ok(PositionPolicy::Mid),
            other => Err(Error::invalid("position policy", format!("`{other}` (expected aspect, last or mid)"))),
        }
    }
}

impl std::fmt::Display for PositionPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Edit parameters of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerEdit<F> {
    /// `[d, r_w]`
    pub a: Tensor<F>,
    /// `[r_w, d]`
    pub b: Tensor<F>,
    /// `[r_rep, d]`, orthonormal rows.
    pub r: Tensor<F>,
    /// `[r_rep, d]`
    pub w_star: Tensor<F>,
    /// `[r_rep]`
    pub bias: Tensor<F>,
}

impl<F: Scalar> LayerEdit<F> {
    fn tensors(&self) -> [&Tensor<F>; 5] {
        [&self.a, &self.b, &self.r, &self.w_star, &self.bias]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<F>; 5] {
        [&mut self.a, &mut self.b, &mut self.r, &mut self.w_star, &mut self.bias]
    }
}

const EDIT_FIELDS: [&str; 5] = ["a", "b", "r", "w_star", "bias"];

/// One layer's edit parameters placed on a tape.
#[derive(Debug, Clone, Copy)]
pub struct EditVars {
    pub a: Var,
    pub b: Var,
    pub r: Var,
    pub w_star: Var,
    pub bias: Var,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteMeta {
    pub layers: Vec<usize>,
    pub rank_w: usize,
    pub rank_rep: usize,
    pub policy: PositionPolicy,
    pub seed: u64,
    pub d_model: usize,
}

/// The trainable edit parameters `θ` over target layers `L*`.
#[derive(Debug, Clone, PartialEq)]
pub struct EditSuite<F> {
    pub meta: SuiteMeta,
    /// Keyed by 1-based layer index.
    pub layers: BTreeMap<usize, LayerEdit<F>>,
}

/// Identity-at-init suite: `B = 0`, `W* = R`, `b = 0`, `A` Gaussian with
/// std `1/sqrt(d)`, `R` an orthonormalized Gaussian matrix.
pub fn init_edit_suite<F: Scalar>(
    config: &ModelConfig,
    layers: &[usize],
    rank_w: usize,
    rank_rep: usize,
    policy: PositionPolicy,
    seed: u64,
) -> Result<EditSuite<F>> {
    let d = config.d_model;
    if rank_w == 0 || rank_rep == 0 || rank_w > d || rank_rep > d {
        return Err(Error::invalid("edit ranks", format!("r_w={rank_w}, r_rep={rank_rep} with d={d}")));
    }
    let mut sorted = layers.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != layers.len() {
        return Err(Error::invalid("edit layers", format!("{layers:?} has duplicates")));
    }
    if let Some(&bad) = sorted.iter().find(|&&l| l == 0 || l > config.n_layers) {
        return Err(Error::invalid("edit layers", format!("layer {bad} outside 1..={}", config.n_layers)));
    }
    let mut out = BTreeMap::new();
    for &l in &sorted {
        let mut rng = RngStream::derive(Purpose::Init, seed, l as u64);
        let a = rng.gaussian(&[d, rank_w], 0.0, 1.0 / (d as f64).sqrt())?;
        let r = reorthonormalize(&rng.gaussian::<F>(&[rank_rep, d], 0.0, 1.0)?)?;
        out.insert(
            l,
            LayerEdit {
                a,
                b: Tensor::zeros(vec![rank_w, d]),
                w_star: r.clone(),
                r,
                bias: Tensor::zeros(vec![rank_rep]),
            },
        );
    }
    Ok(EditSuite {
        meta: SuiteMeta {
            layers: sorted,
            rank_w,
            rank_rep,
            policy,
            seed,
            d_model: d,
        },
        layers: out,
    })
}

impl<F: Scalar> EditSuite<F> {
    /// Trainable tensors in parameter-id order (five per layer, layers ascending).
    pub fn tensors(&self) -> Vec<&Tensor<F>> {
        self.layers.values().flat_map(|e| e.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        self.layers.values_mut().flat_map(|e| e.tensors_mut()).collect()
    }

    /// Optimizer group of each tensor from [`EditSuite::tensors`]: 0 for the
    /// weight edit (`A`, `B`), 1 for the representation edit.
    pub fn groups(&self) -> Vec<usize> {
        self.layers.values().flat_map(|_| [0, 0, 1, 1, 1]).collect()
    }

    /// Places the suite on a tape, as parameters `ParamId(0..)` or constants.
    pub fn bind(&self, tape: &mut Tape<F>, model: &Model<F>, trainable: bool) -> Result<BTreeMap<usize, EditVars>> {
        if self.meta.d_model != model.config.d_model {
            return Err(Error::invalid("edit suite", "width differs from the model's"));
        }
        if let Some(&l) = self.layers.keys().find(|&&l| l > model.config.n_layers) {
            return Err(Error::invalid("edit suite", format!("layer {l} beyond the model's depth")));
        }
        let mut id = 0usize;
        let mut put = |tape: &mut Tape<F>, t: &Tensor<F>| {
            let v = if trainable {
                tape.param(ParamId(id), t.clone())
            } else {
                tape.constant(t.clone())
            };
            id += 1;
            v
        };
        Ok(self
            .layers
            .iter()
            .map(|(&l, e)| {
                let vars = EditVars {
                    a: put(tape, &e.a),
                    b: put(tape, &e.b),
                    r: put(tape, &e.r),
                    w_star: put(tape, &e.w_star),
                    bias: put(tape, &e.bias),
                };
                (l, vars)
            })
            .collect())
    }

    /// Re-orthonormalizes every `R`.
    pub fn reorthonormalize(&mut self) -> Result<()> {
        for e in self.layers.values_mut() {
            e.r = reorthonormalize(&e.r)?;
        }
        Ok(())
    }

    /// Largest `‖R Rᵀ − I‖_max` over the suite's layers.
    pub fn orthonormality_error(&self) -> f64 {
        self.layers.values().map(|e| gram_error(&e.r)).fold(0.0, f64::max)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new("edit-suite", serde_json::to_value(&self.meta)?);
        for (l, e) in &self.layers {
            for (name, t) in EDIT_FIELDS.iter().zip(e.tensors()) {
                ck.push(&format!("edits.{l}.{name}"), t);
            }
        }
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        if ck.kind != "edit-suite" {
            return Err(Error::Checkpoint(format!("{} holds a `{}`, not an edit suite", path.display(), ck.kind)));
        }
        let meta: SuiteMeta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("bad edit-suite metadata: {e}")))?;
        let (d, rw, rr) = (meta.d_model, meta.rank_w, meta.rank_rep);
        let shapes = [vec![d, rw], vec![rw, d], vec![rr, d], vec![rr, d], vec![rr]];
        let mut layers = BTreeMap::new();
        for &l in &meta.layers {
            let get = |i: usize| -> Result<Tensor<F>> {
                let name = format!("edits.{l}.{}", EDIT_FIELDS[i]);
                let t: Tensor<F> = ck.tensor(&name)?;
                if t.shape() != shapes[i].as_slice() {
                    return Err(Error::Checkpoint(format!("tensor `{name}` has shape {:?}", t.shape())));
                }
                Ok(t)
            };
            layers.insert(
                l,
                LayerEdit {
                    a: get(0)?,
                    b: get(1)?,
                    r: get(2)?,
                    w_star: get(3)?,
                    bias: get(4)?,
                },
            );
        }
        if ck.tensors.len() != 5 * meta.layers.len() {
            return Err(Error::Checkpoint("edit suite holds unexpected tensors".into()));
        }
        Ok(EditSuite { meta, layers })
    }
}

/// `α` on the tape for the given rows of `h`.
pub fn rep_edit_on_tape<F: Scalar>(tape: &mut Tape<F>, h: Var, e: &EditVars, rows: &[usize]) -> Result<Var> {
    let sel = tape.select_rows(h, rows)?;
    let rt = tape.transpose(e.r)?;
    let rh = tape.matmul(sel, rt)?;
    let wt = tape.transpose(e.w_star)?;
    let wh = tape.matmul(sel, wt)?;
    let wh = tape.add_row(wh, e.bias)?;
    let delta = tape.sub(wh, rh)?;
    let update = tape.matmul(delta, e.r)?;
    tape.scatter_add_rows(h, rows, update)
}

/// `W + A·B`; `W` is left untouched.
pub fn apply_weight_edit<F: Scalar>(w: &Tensor<F>, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if w.shape().len() != 2 || a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(Error::shape("apply_weight_edit", "operands must be matrices"));
    }
    if a.rows() != w.rows() || b.cols() != w.cols() || a.cols() != b.rows() {
        return Err(Error::shape(
            "apply_weight_edit",
            format!("W {:?}, A {:?}, B {:?}", w.shape(), a.shape(), b.shape()),
        ));
    }
    w.add(&a.matmul(b)?)
}

/// `α(h)` for each row of `h` (`[n, d]`).
pub fn apply_rep_edit<F: Scalar>(h: &Tensor<F>, r: &Tensor<F>, w_star: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if h.shape().len() != 2 || r.shape().len() != 2 || r.shape() != w_star.shape() || b.numel() != r.rows() || h.cols() != r.cols() {
        return Err(Error::shape(
            "apply_rep_edit",
            format!("h {:?}, R {:?}, W* {:?}, b {:?}", h.shape(), r.shape(), w_star.shape(), b.shape()),
        ));
    }
    let (n, d, k) = (h.rows(), h.cols(), r.rows());
    let mut out = h.data().to_vec();
    for i in 0..n {
        let hi = h.row(i);
        for j in 0..k {
            let (rj, wj) = (r.row(j), w_star.row(j));
            let coef: F = hi.iter().zip(wj).map(|(&x, &w)| x * w).sum::<F>() + b.data()[j]
                - hi.iter().zip(rj).map(|(&x, &r)| x * r).sum::<F>();
            for (o, &rv) in out[i * d..(i + 1) * d].iter_mut().zip(rj) {
                *o += coef * rv;
            }
        }
    }
    Tensor::new(vec![n, d], out)
}

/// Orthonormal basis of `R`'s row space with the same row order, by two
/// passes of modified Gram-Schmidt in double precision.
pub fn reorthonormalize<F: Scalar>(r: &Tensor<F>) -> Result<Tensor<F>> {
    if r.shape().len() != 2 || r.rows() > r.cols() || r.rows() == 0 {
        return Err(Error::shape("reorthonormalize", format!("{:?} is not a wide matrix", r.shape())));
    }
    let (k, d) = (r.rows(), r.cols());
    let mut rows: Vec<Vec<f64>> = (0..k).map(|i| r.row(i).iter().map(|x| x.as_f64()).collect()).collect();
    let scale = rows.iter().map(|v| norm(v)).fold(0.0, f64::max);
    for _pass in 0..2 {
        for i in 0..k {
            for j in 0..i {
                let (done, rest) = rows.split_at_mut(i);
                let c: f64 = rest[0].iter().zip(&done[j]).map(|(a, b)| a * b).sum();
                for (x, y) in rest[0].iter_mut().zip(&done[j]) {
                    *x -= c * y;
                }
            }
            let n = norm(&rows[i]);
            if !(n > 1e-10 * scale.max(f64::MIN_POSITIVE)) {
                return Err(Error::invalid("representation projection", "R is rank deficient"));
            }
            for x in &mut rows[i] {
                *x /= n;
            }
        }
    }
    Tensor::from_f64(vec![k, d], &rows.concat())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖R Rᵀ − I‖_max`.
pub fn gram_error<F: Scalar>(r: &Tensor<F>) -> f64 {
    let k = r.rows();
    let mut worst = 0.0f64;
    for i in 0..k {
        for j in 0..k {
            let g: f64 = r.row(i).iter().zip(r.row(j)).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g - target).abs());
        }
    }
    worst
}

/// Positions (0-based) the representation edit targets for `prompt`.
///
/// `Mid` draws uniformly from 1-based indices `i` with `T/3 < i <= 2T/3`
/// (falling back to the centre for very short prompts), seeded by the
/// sample id so repeated calls agree.
pub fn select_positions(prompt: &PromptRendering, policy: PositionPolicy, seed: u64) -> Result<Vec<usize>> {
    let t = prompt.len();
    if t == 0 {
        return Err(Error::invalid("prompt", "empty"));
    }
    match policy {
        PositionPolicy::Aspect => {
            if prompt.aspect_positions.is_empty() {
                Err(Error::invalid("prompt", "no aspect positions"))
            } else {
                Ok(prompt.aspect_positions.clone())
            }
        }
        PositionPolicy::Last => Ok(vec![t - 1]),
        PositionPolicy::Mid => {
            let candidates: Vec<usize> = (1..=t).filter(|&i| 3 * i > t && 3 * i <= 2 * t).collect();
            let one_based = if candidates.is_empty() {
                t.div_ceil(2)
            } else {
                let mut rng = RngStream::derive(Purpose::PositionDraw, seed, prompt.sample_id);
                candidates[rng.below(candidates.len())]
            };
            Ok(vec![one_based - 1])
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub trainable: usize,
    pub base: usize,
    pub fraction: f64,
}

/// Trainable edit parameters against the base model's size. The output
/// projection is square, so `k = d`.
pub fn count_params<F: Scalar>(suite: &EditSuite<F>, base: usize) -> ParamCount {
    let trainable = suite.tensors().iter().map(|t| t.numel()).sum();
    ParamCount {
        trainable,
        base,
        fraction: if base == 0 { 0.0 } else { trainable as f64 / base as f64 },
    }
}
