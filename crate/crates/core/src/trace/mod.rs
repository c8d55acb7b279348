// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal tracing: clean, corrupted and corrupted-with-restoration runs,
//! per-sample total and indirect effects, and their aggregation over
//! samples by role bucket and by absolute position.

mod export;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use export::{export_heatmap, positions_path, read_heatmap, HeatmapTable, TraceSidecar};

use crate::data::PromptRendering;
use crate::error::{Error, Result};
use crate::model::{predict_polarity, ForwardOptions, HiddenCache, Model, Noise, Patch, Readout};
use crate::rng::{Purpose, RngStream};
use crate::tensor::{Scalar, Tensor};

/// Which layer-0 positions receive corruption noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseScope {
    Aspect,
    All,
}

impl NoiseScope {
    pub fn name(self) -> &'static str {
        match self {
            NoiseScope::Aspect => "aspect",
            NoiseScope::All => "all",
        }
    }
}

impl fmt::Display for NoiseScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aspect" | "aspect-span" => Ok(NoiseScope::Aspect),
            "all" | "all-positions" => Ok(NoiseScope::All),
            _ => Err(Error::invalid("noise scope", format!("`{s}` (expected aspect or all)"))),
        }
    }
}

/// Zero-mean Gaussian corruption whose per-coordinate standard deviation is
/// `scale` times that of the token embedding matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub scale: f64,
    pub scope: NoiseScope,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            scale: 3.0,
            scope: NoiseScope::Aspect,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid("noise scale", format!("{}", self.scale)));
        }
        Ok(())
    }

    /// Corrupted positions for `prompt`.
    pub fn positions(&self, prompt: &PromptRendering) -> Result<Vec<usize>> {
        let positions = match self.scope {
            NoiseScope::Aspect => prompt.aspect_positions.clone(),
            NoiseScope::All => (0..prompt.len()).collect(),
        };
        if positions.is_empty() {
            return Err(Error::invalid("noise scope", format!("no positions to corrupt in sample {}", prompt.sample_id)));
        }
        Ok(positions)
    }

    /// The noise for `prompt`; identical on every call, so a corrupted run
    /// and all of its restoration runs share it.
    pub fn draw<F: Scalar>(&self, model: &Model<F>, prompt: &PromptRendering) -> Result<Noise<F>> {
        self.validate()?;
        let positions = self.positions(prompt)?;
        let std = embedding_std(model);
        let mut rng = RngStream::derive(Purpose::CorruptionNoise, self.seed, prompt.sample_id);
        let mut values = Vec::with_capacity(positions.len() * std.len());
        for _ in &positions {
            for s in &std {
                values.push(F::lit(self.scale * s * rng.standard_normal()));
            }
        }
        Ok(Noise {
            values: Tensor::new(vec![positions.len(), std.len()], values)?,
            positions,
        })
    }
}

/// Standard deviation of every column of the token embedding matrix.
pub fn embedding_std<F: Scalar>(model: &Model<F>) -> Vec<f64> {
    let e = &model.params.tok_emb;
    let (v, d) = (e.rows(), e.cols());
    let mut mean = vec![0.0; d];
    for r in 0..v {
        for (m, x) in mean.iter_mut().zip(e.row(r)) {
            *m += x.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= v as f64);
    let mut var = vec![0.0; d];
    for r in 0..v {
        for ((s, x), m) in var.iter_mut().zip(e.row(r)).zip(&mean) {
            *s += (x.as_f64() - m).powi(2);
        }
    }
    var.into_iter().map(|s| (s / v as f64).sqrt()).collect()
}

/// Outcome of one traced forward pass.
#[derive(Debug, Clone)]
pub struct TraceRun<F> {
    /// Probability of the gold label token.
    pub prob: f64,
    /// Verbalizer index of the most probable label.
    pub label: usize,
    pub cache: Option<HiddenCache<F>>,
}

fn check_prompt<F: Scalar>(model: &Model<F>, prompt: &PromptRendering) -> Result<()> {
    if prompt.is_empty() || prompt.len() > model.config.max_seq {
        return Err(Error::invalid(
            "prompt",
            format!("{} tokens, limit is {}", prompt.len(), model.config.max_seq),
        ));
    }
    Ok(())
}

fn gold_index(prompt: &PromptRendering) -> Result<usize> {
    prompt
        .verbalizer
        .iter()
        .position(|&t| t == prompt.gold)
        .ok_or_else(|| Error::invalid("gold label", format!("token {} is not a verbalizer token", prompt.gold)))
}

fn read_run<F: Scalar>(logits: &[F], prompt: &PromptRendering, cache: Option<HiddenCache<F>>) -> Result<TraceRun<F>> {
    let pred = predict_polarity(logits, &prompt.verbalizer)?;
    Ok(TraceRun {
        prob: pred.probs[gold_index(prompt)?],
        label: pred.label,
        cache,
    })
}

/// Unmodified forward pass recording every hidden state.
pub fn clean_run<F: Scalar>(model: &Model<F>, prompt: &PromptRendering) -> Result<TraceRun<F>> {
    check_prompt(model, prompt)?;
    let opts = ForwardOptions {
        record_hidden: true,
        ..ForwardOptions::default()
    };
    let mut out = model.forward(&prompt.ids, &opts)?;
    let cache = out.cache.take();
    read_run(out.last_logits(), prompt, cache)
}

/// Forward pass with layer-0 noise, recording every hidden state.
pub fn corrupted_run<F: Scalar>(model: &Model<F>, prompt: &PromptRendering, noise: &NoiseSpec) -> Result<TraceRun<F>> {
    check_prompt(model, prompt)?;
    let n = noise.draw(model, prompt)?;
    let opts = ForwardOptions {
        record_hidden: true,
        noise: Some(&n),
        ..ForwardOptions::default()
    };
    let mut out = model.forward(&prompt.ids, &opts)?;
    let cache = out.cache.take();
    read_run(out.last_logits(), prompt, cache)
}

fn check_cache<F: Scalar>(model: &Model<F>, prompt: &PromptRendering, clean: &HiddenCache<F>) -> Result<()> {
    if clean.n_layers() != model.config.n_layers || clean.len() != prompt.len() {
        return Err(Error::invalid(
            "clean cache",
            format!(
                "{} layers x {} positions for a {}-layer model and a {}-token prompt",
                clean.n_layers(),
                clean.len(),
                model.config.n_layers,
                prompt.len()
            ),
        ));
    }
    Ok(())
}

/// Corrupted run in which each `(layer, position)` state is overwritten
/// with its clean value; returns the gold-label probability.
pub fn restore_cells<F: Scalar>(
    model: &Model<F>,
    prompt: &PromptRendering,
    noise: &NoiseSpec,
    cells: &[(usize, usize)],
    clean: &HiddenCache<F>,
) -> Result<f64> {
    check_prompt(model, prompt)?;
    check_cache(model, prompt, clean)?;
    if let Some(&(l, i)) = cells.iter().find(|&&(l, i)| l > model.config.n_layers || i >= prompt.len()) {
        return Err(Error::invalid("restored cell", format!("({l}, {i}) outside the grid")));
    }
    let n = noise.draw(model, prompt)?;
    let patches: Vec<Patch<F>> = cells.iter().map(|&(l, i)| clean.patch(l, i)).collect();
    let opts = ForwardOptions {
        noise: Some(&n),
        restore: &patches,
        ..ForwardOptions::default()
    };
    let out = model.forward(&prompt.ids, &opts)?;
    Ok(read_run(out.last_logits(), prompt, None)?.prob)
}

/// Corrupted run with the single state `h^(layer)` at `position` restored.
pub fn restoration_run<F: Scalar>(
    model: &Model<F>,
    prompt: &PromptRendering,
    noise: &NoiseSpec,
    cell: (usize, usize),
    clean: &HiddenCache<F>,
) -> Result<f64> {
    restore_cells(model, prompt, noise, &[cell], clean)
}

/// Effects of one traced sample. Verbalizer indices for labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceGrid {
    pub sample_id: u64,
    pub clean_prob: f64,
    pub corrupted_prob: f64,
    pub te: f64,
    /// `ie[l - 1][i]` for block output `l` in `1..=L` and position `i`.
    pub ie: Vec<Vec<f64>>,
    pub gold_label: usize,
    pub clean_label: usize,
    pub corrupted_label: usize,
    pub retained: bool,
}

impl TraceGrid {
    pub fn n_layers(&self) -> usize {
        self.ie.len()
    }

    pub fn len(&self) -> usize {
        self.ie.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Indirect effect at 1-based layer `l` and 0-based position `i`.
    pub fn at(&self, l: usize, i: usize) -> f64 {
        self.ie[l - 1][i]
    }
}

/// One clean run, one corrupted run and a restoration run for every cell
/// of layers `1..=L`.
///
/// Restoring `h^(l)` at one position leaves every state up to layer `l`
/// equal to the corrupted run's, so each restoration resumes from the
/// corrupted cache at layer `l` instead of re-running the lower blocks.
pub fn trace_sample<F: Scalar>(model: &Model<F>, prompt: &PromptRendering, noise: &NoiseSpec) -> Result<TraceGrid> {
    let gold = gold_index(prompt)?;
    let clean = clean_run(model, prompt)?;
    let corrupted = corrupted_run(model, prompt, noise)?;
    let (cc, kc) = (clean.cache.as_ref().expect("recorded"), corrupted.cache.as_ref().expect("recorded"));
    let opts = ForwardOptions::<F> {
        readout: Readout::Last,
        ..ForwardOptions::default()
    };
    let n_layers = model.config.n_layers;
    let mut ie = Vec::with_capacity(n_layers);
    for l in 1..=n_layers {
        let mut row = Vec::with_capacity(prompt.len());
        for i in 0..prompt.len() {
            let mut h = kc.states[l].clone();
            h.row_mut(i).copy_from_slice(cc.get(l, i));
            let out = model.forward_from(l, &h, &opts)?;
            let p = read_run(out.last_logits(), prompt, None)?.prob;
            row.push(p - corrupted.prob);
        }
        ie.push(row);
    }
    Ok(TraceGrid {
        sample_id: prompt.sample_id,
        clean_prob: clean.prob,
        corrupted_prob: corrupted.prob,
        te: clean.prob - corrupted.prob,
        ie,
        gold_label: gold,
        clean_label: clean.label,
        corrupted_label: corrupted.label,
        retained: clean.label == gold && corrupted.label != gold,
    })
}

/// A seeded draw of up to `n` prompts without replacement, in draw order.
pub fn draw_samples(prompts: &[PromptRendering], n: usize, seed: u64) -> Vec<PromptRendering> {
    let mut order: Vec<usize> = (0..prompts.len()).collect();
    RngStream::new(Purpose::Shuffle, seed).shuffle(&mut order);
    order.into_iter().take(n).map(|i| prompts[i].clone()).collect()
}

/// Traces every prompt in order; `progress` sees each finished index.
pub fn trace_all<F: Scalar>(
    model: &Model<F>,
    prompts: &[PromptRendering],
    noise: &NoiseSpec,
    mut progress: impl FnMut(usize),
) -> Result<Vec<TraceGrid>> {
    prompts
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let g = trace_sample(model, p, noise);
            progress(k);
            g
        })
        .collect()
}

/// Position category used to pool effects across prompts of different
/// lengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoleBucket {
    First,
    PreAspect,
    AspectFirst,
    AspectMiddle,
    AspectLast,
    PostAspect,
    Last,
}

impl RoleBucket {
    pub const ALL: [RoleBucket; 7] = [
        RoleBucket::First,
        RoleBucket::PreAspect,
        RoleBucket::AspectFirst,
        RoleBucket::AspectMiddle,
        RoleBucket::AspectLast,
        RoleBucket::PostAspect,
        RoleBucket::Last,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RoleBucket::First => "first",
            RoleBucket::PreAspect => "pre-aspect",
            RoleBucket::AspectFirst => "aspect-first",
            RoleBucket::AspectMiddle => "aspect-middle",
            RoleBucket::AspectLast => "aspect-last",
            RoleBucket::PostAspect => "post-aspect",
            RoleBucket::Last => "last",
        }
    }

    pub fn is_aspect(self) -> bool {
        matches!(self, RoleBucket::AspectFirst | RoleBucket::AspectMiddle | RoleBucket::AspectLast)
    }

    fn index(self) -> usize {
        self as usize
    }

    /// Role of 0-based `position`. The first and last prompt positions
    /// take precedence; a one-token aspect is `AspectLast`.
    pub fn of(prompt: &PromptRendering, position: usize) -> RoleBucket {
        let (first, last) = (prompt.aspect_first(), prompt.aspect_last());
        if position == 0 {
            RoleBucket::First
        } else if position + 1 == prompt.len() {
            RoleBucket::Last
        } else if position < first {
            RoleBucket::PreAspect
        } else if position > last {
            RoleBucket::PostAspect
        } else if position == last {
            RoleBucket::AspectLast
        } else if position == first {
            RoleBucket::AspectFirst
        } else {
            RoleBucket::AspectMiddle
        }
    }
}

impl fmt::Display for RoleBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RoleBucket {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RoleBucket::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::invalid("role bucket", s.to_string()))
    }
}

/// Mean indirect effect per layer for one row of a summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AieRow<K> {
    pub key: K,
    /// Retained samples contributing to this row.
    pub count: usize,
    /// Indexed by layer `1..=L` at `aie[l - 1]`.
    pub aie: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub ate: f64,
    pub n_total: usize,
    pub n_retained: usize,
    pub n_layers: usize,
    /// Buckets that occur in at least one retained sample, in role order.
    pub by_bucket: Vec<AieRow<RoleBucket>>,
    /// 0-based absolute positions.
    pub by_position: Vec<AieRow<usize>>,
}

impl TraceSummary {
    pub fn bucket(&self, b: RoleBucket) -> Option<&AieRow<RoleBucket>> {
        self.by_bucket.iter().find(|r| r.key == b)
    }
}

/// Per-sample bucket table: mean indirect effect over each bucket's
/// positions, per layer.
pub type BucketTable = Vec<Option<Vec<f64>>>;

pub fn bucket_means(grid: &TraceGrid, prompt: &PromptRendering) -> Result<BucketTable> {
    if grid.len() != prompt.len() || grid.sample_id != prompt.sample_id {
        return Err(Error::invalid(
            "trace grid",
            format!("grid for sample {} does not match prompt {}", grid.sample_id, prompt.sample_id),
        ));
    }
    let mut sums: Vec<Option<(Vec<f64>, usize)>> = vec![None; RoleBucket::ALL.len()];
    for i in 0..prompt.len() {
        let b = RoleBucket::of(prompt, i).index();
        let (s, n) = sums[b].get_or_insert_with(|| (vec![0.0; grid.n_layers()], 0));
        for (l, v) in s.iter_mut().enumerate() {
            *v += grid.ie[l][i];
        }
        *n += 1;
    }
    Ok(sums
        .into_iter()
        .map(|e| e.map(|(s, n)| s.into_iter().map(|v| v / n as f64).collect()))
        .collect())
}

/// Retained samples in a canonical order, paired with their prompts.
fn retained_pairs<'a>(
    grids: &'a [TraceGrid],
    prompts: &'a [PromptRendering],
) -> Result<Vec<(&'a TraceGrid, &'a PromptRendering)>> {
    if grids.is_empty() {
        return Err(Error::Tracing("no traced samples".into()));
    }
    if grids.len() != prompts.len() {
        return Err(Error::invalid("trace inputs", format!("{} grids for {} prompts", grids.len(), prompts.len())));
    }
    let n_layers = grids[0].n_layers();
    if grids.iter().any(|g| g.n_layers() != n_layers) {
        return Err(Error::invalid("trace grids", "layer counts differ"));
    }
    let mut pairs: Vec<_> = grids.iter().zip(prompts).filter(|(g, _)| g.retained).collect();
    if pairs.is_empty() {
        return Err(Error::Tracing(format!(
            "none of {} samples was retained (clean prediction correct and corrupted prediction wrong)",
            grids.len()
        )));
    }
    // summation order must not depend on input order
    pairs.sort_by(|a, b| {
        (a.0.sample_id, a.0.te.to_bits(), a.0.len()).cmp(&(b.0.sample_id, b.0.te.to_bits(), b.0.len()))
    });
    Ok(pairs)
}

/// Averages total and indirect effects over retained samples.
pub fn aggregate(grids: &[TraceGrid], prompts: &[PromptRendering]) -> Result<TraceSummary> {
    let pairs = retained_pairs(grids, prompts)?;
    let n_layers = grids[0].n_layers();
    let ate = pairs.iter().map(|(g, _)| g.te).sum::<f64>() / pairs.len() as f64;

    let mut bucket_sums: Vec<(Vec<f64>, usize)> = vec![(vec![0.0; n_layers], 0); RoleBucket::ALL.len()];
    let max_len = pairs.iter().map(|(g, _)| g.len()).max().unwrap_or(0);
    let mut pos_sums: Vec<(Vec<f64>, usize)> = vec![(vec![0.0; n_layers], 0); max_len];
    for (g, p) in &pairs {
        for (b, row) in bucket_means(g, p)?.into_iter().enumerate() {
            if let Some(row) = row {
                let (s, n) = &mut bucket_sums[b];
                s.iter_mut().zip(&row).for_each(|(a, v)| *a += v);
                *n += 1;
            }
        }
        for (i, (s, n)) in pos_sums.iter_mut().enumerate().take(g.len()) {
            for (l, a) in s.iter_mut().enumerate() {
                *a += g.ie[l][i];
            }
            *n += 1;
        }
    }
    let finish = |(s, n): (Vec<f64>, usize)| s.into_iter().map(|v| v / n as f64).collect::<Vec<f64>>();
    let by_bucket = RoleBucket::ALL
        .into_iter()
        .zip(bucket_sums)
        .filter(|(_, (_, n))| *n > 0)
        .map(|(key, (s, n))| AieRow {
            key,
            count: n,
            aie: finish((s, n)),
        })
        .collect();
    let by_position = pos_sums
        .into_iter()
        .enumerate()
        .map(|(key, (s, n))| AieRow {
            key,
            count: n,
            aie: finish((s, n)),
        })
        .collect();
    Ok(TraceSummary {
        ate,
        n_total: grids.len(),
        n_retained: pairs.len(),
        n_layers,
        by_bucket,
        by_position,
    })
}

/// Aspect-bucket versus other-bucket contrast within a layer band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandContrast {
    /// Mean over aspect-bucket cells of the band.
    pub aspect: f64,
    /// Mean over first, pre-aspect and post-aspect cells of the band.
    pub other: f64,
    pub difference: f64,
    /// Bootstrap standard error of `difference`.
    pub std_error: f64,
    pub resamples: usize,
}

/// Difference between aspect-bucket and non-aspect, non-last bucket AIE
/// over the 1-based layers in `band`, with a bootstrap standard error from
/// resampling retained samples.
pub fn band_contrast(
    grids: &[TraceGrid],
    prompts: &[PromptRendering],
    band: &[usize],
    resamples: usize,
    seed: u64,
) -> Result<BandContrast> {
    let pairs = retained_pairs(grids, prompts)?;
    let n_layers = grids[0].n_layers();
    if band.is_empty() || band.iter().any(|&l| l == 0 || l > n_layers) {
        return Err(Error::invalid("layer band", format!("{band:?} for {n_layers} layers")));
    }
    if resamples < 2 {
        return Err(Error::invalid("bootstrap resamples", format!("{resamples}")));
    }
    let tables: Vec<BucketTable> = pairs.iter().map(|(g, p)| bucket_means(g, p)).collect::<Result<_>>()?;
    let all: Vec<&BucketTable> = tables.iter().collect();
    let value = |ts: &[&BucketTable]| {
        let (a, o) = split_means(ts, band);
        a - o
    };
    let (aspect, other) = split_means(&all, band);
    let mut rng = RngStream::new(Purpose::Bootstrap, seed);
    let mut stats = Vec::with_capacity(resamples);
    let mut pick = Vec::with_capacity(all.len());
    for _ in 0..resamples {
        pick.clear();
        for _ in 0..all.len() {
            pick.push(all[rng.below(all.len())]);
        }
        stats.push(value(&pick));
    }
    let m = stats.iter().sum::<f64>() / resamples as f64;
    let std_error = (stats.iter().map(|s| (s - m).powi(2)).sum::<f64>() / (resamples - 1) as f64).sqrt();
    Ok(BandContrast {
        aspect,
        other,
        difference: aspect - other,
        std_error,
        resamples,
    })
}

fn split_means(tables: &[&BucketTable], band: &[usize]) -> (f64, f64) {
    let mut sums = vec![(0.0, 0usize); RoleBucket::ALL.len()];
    for t in tables {
        for (b, row) in t.iter().enumerate() {
            if let Some(row) = row {
                sums[b].0 += band.iter().map(|&l| row[l - 1]).sum::<f64>();
                sums[b].1 += 1;
            }
        }
    }
    let (mut asp, mut oth) = (Vec::new(), Vec::new());
    for (bucket, (s, n)) in RoleBucket::ALL.into_iter().zip(sums) {
        if n == 0 || bucket == RoleBucket::Last {
            continue;
        }
        // mean of this bucket's band cells
        let cell = s / (n as f64 * band.len() as f64);
        if bucket.is_aspect() {
            asp.push(cell);
        } else {
            oth.push(cell);
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    (mean(&asp), mean(&oth))
}
