// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment orchestration: in-domain and cross-domain editing runs, layer
//! and position ablations, and report tables averaged over seeds.

mod report;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use report::{read_rows, render_table, write_report, ReportRow};

use crate::data::{
    contrastive_mask, domain_counts, is_test_sample, render_all, split_domains, PromptRendering, PromptTemplate, Sample,
    Vocab,
};
use crate::editing::{count_params, init_edit_suite, EditSuite, PositionPolicy};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Scalar;
use crate::train_eval::{evaluate_accuracy, train_edits, Metrics, TrainConfig};

/// Target layers of an edit suite, by name or as an explicit list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerBand {
    Early,
    Mid,
    Late,
    All,
    List(Vec<usize>),
}

impl LayerBand {
    pub const THIRDS: [LayerBand; 3] = [LayerBand::Early, LayerBand::Mid, LayerBand::Late];

    /// 1-based block indices. Named thirds split `1..=L` into contiguous
    /// runs: `ceil(L/3)` early layers, then half the rest (rounded up) in
    /// the middle, the remainder late.
    pub fn resolve(&self, n_layers: usize) -> Result<Vec<usize>> {
        if n_layers < 3 && !matches!(self, LayerBand::All | LayerBand::List(_)) {
            return Err(Error::invalid("layer band", format!("{self} needs at least 3 layers")));
        }
        let e = n_layers.div_ceil(3);
        let m = e + (n_layers - e).div_ceil(2);
        let layers: Vec<usize> = match self {
            LayerBand::Early => (1..=e).collect(),
            LayerBand::Mid => (e + 1..=m).collect(),
            LayerBand::Late => (m + 1..=n_layers).collect(),
            LayerBand::All => (1..=n_layers).collect(),
            LayerBand::List(v) => {
                let mut v = v.clone();
                v.sort_unstable();
                if v.windows(2).any(|w| w[0] == w[1]) || v.iter().any(|&l| l == 0 || l > n_layers) {
                    return Err(Error::invalid("layer list", format!("{v:?} for a {n_layers}-layer model")));
                }
                v
            }
        };
        if layers.is_empty() {
            return Err(Error::invalid("layer band", format!("{self} is empty for {n_layers} layers")));
        }
        Ok(layers)
    }
}

impl fmt::Display for LayerBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerBand::Early => f.write_str("early"),
            LayerBand::Mid => f.write_str("mid"),
            LayerBand::Late => f.write_str("late"),
            LayerBand::All => f.write_str("all"),
            LayerBand::List(v) => {
                let s: Vec<String> = v.iter().map(usize::to_string).collect();
                f.write_str(&s.join(","))
            }
        }
    }
}

impl FromStr for LayerBand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "early" => Ok(LayerBand::Early),
            "mid" | "middle" => Ok(LayerBand::Mid),
            "late" => Ok(LayerBand::Late),
            "all" => Ok(LayerBand::All),
            _ => s
                .split(',')
                .map(|p| p.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .ok()
                .filter(|v| !v.is_empty())
                .map(LayerBand::List)
                .ok_or_else(|| Error::invalid("layer band", format!("`{s}` (expected early, mid, late, all or a comma list)"))),
        }
    }
}

/// Everything that defines one edit-suite training run except the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditSpec {
    pub layers: LayerBand,
    pub policy: PositionPolicy,
    pub rank_w: usize,
    pub rank_rep: usize,
    pub train: TrainConfig,
}

impl Default for EditSpec {
    fn default() -> Self {
        EditSpec {
            layers: LayerBand::Mid,
            policy: PositionPolicy::Aspect,
            rank_w: 2,
            rank_rep: 2,
            train: TrainConfig::desk_scale(),
        }
    }
}

/// Seeds, domains and edit settings shared by a family of runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub edit: EditSpec,
    pub seeds: Vec<u64>,
    /// In-domain runs use these domains; empty means every corpus domain.
    pub domains: Vec<String>,
    /// Ordered (source, target) pairs for cross-domain runs; empty means
    /// every ordered pair of distinct domains.
    pub pairs: Vec<(String, String)>,
    pub test_fraction: f64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            edit: EditSpec::default(),
            seeds: vec![0, 1, 2],
            domains: Vec::new(),
            pairs: Vec::new(),
            test_fraction: 0.25,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::invalid("seed list", "empty"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::invalid("test fraction", format!("{}", self.test_fraction)));
        }
        self.edit.train.validate()
    }
}

/// A frozen base model with the corpus and prompt format it was trained on.
#[derive(Debug, Clone)]
pub struct Workbench<F> {
    pub model: Model<F>,
    pub vocab: Vocab,
    pub corpus: Vec<Sample>,
    pub template: PromptTemplate,
}

/// Rendered train and test prompts of one (source, target) pair.
#[derive(Debug, Clone)]
pub struct PairData {
    pub source: String,
    pub target: String,
    pub train: Vec<PromptRendering>,
    pub test: Vec<PromptRendering>,
    /// Test prompts from contrastive sentences.
    pub contrastive: Vec<PromptRendering>,
}

impl<F: Scalar> Workbench<F> {
    pub fn domains(&self) -> Vec<String> {
        domain_counts(&self.corpus).into_keys().collect()
    }

    fn render(&self, samples: &[Sample]) -> Result<Vec<PromptRendering>> {
        render_all(samples, &self.vocab, &self.template, self.model.config.max_seq)
    }

    /// Trains on `source`'s training split and tests on `target`'s test split.
    pub fn pair_data(&self, source: &str, target: &str, test_fraction: f64) -> Result<PairData> {
        let split = split_domains(&self.corpus, source, target, test_fraction)?;
        let test_samples = if split.is_in_domain() { &split.in_test } else { &split.out_test };
        let mask = contrastive_mask(test_samples);
        let test = self.render(test_samples)?;
        let contrastive = test.iter().zip(mask).filter(|(_, c)| *c).map(|(p, _)| p.clone()).collect();
        if split.train.is_empty() || test.is_empty() {
            return Err(Error::Data(format!("empty split for {}->{}", split.source, split.target)));
        }
        Ok(PairData {
            train: self.render(&split.train)?,
            test,
            contrastive,
            source: split.source,
            target: split.target,
        })
    }
}

/// Outcome of one trained suite on one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub source: String,
    pub target: String,
    pub layers: Vec<usize>,
    pub policy: PositionPolicy,
    pub seed: u64,
    pub accuracy: f64,
    /// Accuracy on the contrastive part of the test split.
    pub contrastive_accuracy: f64,
    pub trainable: usize,
    pub trainable_fraction: f64,
    pub metrics: Metrics,
}

/// Trains one suite with `seed` and evaluates it on the pair's test split.
pub fn run_edit<F: Scalar>(wb: &Workbench<F>, data: &PairData, edit: &EditSpec, seed: u64) -> Result<RunResult> {
    Ok(run_edit_with_suite(wb, data, edit, seed)?.0)
}

/// [`run_edit`] that also returns the trained suite.
pub fn run_edit_with_suite<F: Scalar>(
    wb: &Workbench<F>,
    data: &PairData,
    edit: &EditSpec,
    seed: u64,
) -> Result<(RunResult, EditSuite<F>)> {
    let layers = edit.layers.resolve(wb.model.config.n_layers)?;
    let mut suite = init_edit_suite(&wb.model.config, &layers, edit.rank_w, edit.rank_rep, edit.policy, seed)?;
    let config = TrainConfig { seed, ..edit.train };
    let metrics = train_edits(&wb.model, &mut suite, &data.train, &config, |_| {})?;
    let accuracy = evaluate_accuracy(&wb.model, Some(&suite), &data.test)?.accuracy;
    let contrastive_accuracy = if data.contrastive.is_empty() {
        f64::NAN
    } else {
        evaluate_accuracy(&wb.model, Some(&suite), &data.contrastive)?.accuracy
    };
    let count = count_params(&suite, wb.model.config.param_count());
    let result = RunResult {
        source: data.source.clone(),
        target: data.target.clone(),
        layers,
        policy: edit.policy,
        seed,
        accuracy,
        contrastive_accuracy,
        trainable: count.trainable,
        trainable_fraction: count.fraction,
        metrics,
    };
    Ok((result, suite))
}

fn pair_tag(source: &str, target: &str) -> String {
    format!("{source}->{target}")
}

/// Which training-split samples a base model learns from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseSubset {
    /// Every training sample.
    All,
    /// Only samples whose sentence carries a single label, so the model
    /// never sees two aspects of one sentence disagree.
    Plain,
}

/// Training-split samples (all domains) selected by `subset`.
pub fn base_training_set(corpus: &[Sample], test_fraction: f64, subset: BaseSubset) -> Vec<Sample> {
    let contrastive = contrastive_mask(corpus);
    corpus
        .iter()
        .zip(contrastive)
        .filter(|(s, c)| !is_test_sample(s, test_fraction) && (subset == BaseSubset::All || !*c))
        .map(|(s, _)| s.clone())
        .collect()
}

/// Mean and sample standard deviation; the deviation needs two values.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() >= 2).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

fn row_from(experiment: &str, runs: &[RunResult]) -> ReportRow {
    let acc: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
    let con: Vec<f64> = runs.iter().map(|r| r.contrastive_accuracy).collect();
    let (mean, std) = mean_std(&acc);
    let r = &runs[0];
    ReportRow {
        experiment: experiment.to_string(),
        pair: pair_tag(&r.source, &r.target),
        layers: r.layers.clone(),
        policy: r.policy.name().to_string(),
        trainable: r.trainable,
        trainable_fraction: r.trainable_fraction,
        mean,
        std,
        contrastive_mean: mean_std(&con).0,
        seeds: runs.iter().map(|r| r.seed).collect(),
        accuracies: acc,
    }
}

/// One row per seed list: trains a fresh suite per seed.
pub fn run_seeds<F: Scalar>(
    wb: &Workbench<F>,
    data: &PairData,
    edit: &EditSpec,
    seeds: &[u64],
    experiment: &str,
    log: &mut dyn FnMut(&RunResult),
) -> Result<ReportRow> {
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let r = run_edit(wb, data, edit, seed)?;
        log(&r);
        runs.push(r);
    }
    Ok(row_from(experiment, &runs))
}

/// Accuracy of the unedited model on the pair's test split.
pub fn baseline_row<F: Scalar>(wb: &Workbench<F>, data: &PairData, experiment: &str) -> Result<ReportRow> {
    let accuracy = evaluate_accuracy(&wb.model, None, &data.test)?.accuracy;
    let contrastive_mean = if data.contrastive.is_empty() {
        f64::NAN
    } else {
        evaluate_accuracy(&wb.model, None, &data.contrastive)?.accuracy
    };
    Ok(ReportRow {
        experiment: experiment.to_string(),
        pair: pair_tag(&data.source, &data.target),
        layers: Vec::new(),
        policy: "none".into(),
        trainable: 0,
        trainable_fraction: 0.0,
        mean: accuracy,
        std: None,
        contrastive_mean,
        seeds: Vec::new(),
        accuracies: vec![accuracy],
    })
}

fn in_domains<F: Scalar>(wb: &Workbench<F>, spec: &ExperimentSpec) -> Vec<String> {
    if spec.domains.is_empty() {
        wb.domains()
    } else {
        spec.domains.clone()
    }
}

/// Unedited accuracy per in-domain pair.
pub fn baseline_rows<F: Scalar>(wb: &Workbench<F>, spec: &ExperimentSpec) -> Result<Vec<ReportRow>> {
    spec.validate()?;
    in_domains(wb, spec)
        .iter()
        .map(|d| baseline_row(wb, &wb.pair_data(d, d, spec.test_fraction)?, "no-edit"))
        .collect()
}

/// One edited row per domain, trained and tested within that domain.
pub fn run_in_domain<F: Scalar>(
    wb: &Workbench<F>,
    spec: &ExperimentSpec,
    log: &mut dyn FnMut(&RunResult),
) -> Result<Vec<ReportRow>> {
    spec.validate()?;
    let mut rows = Vec::new();
    for d in &in_domains(wb, spec) {
        let data = wb.pair_data(d, d, spec.test_fraction)?;
        rows.push(run_seeds(wb, &data, &spec.edit, &spec.seeds, "in-domain", log)?);
    }
    Ok(rows)
}

/// Every ordered pair of distinct domains unless `spec.pairs` names some.
pub fn cross_domain_pairs<F: Scalar>(wb: &Workbench<F>, spec: &ExperimentSpec) -> Result<Vec<(String, String)>> {
    let domains = wb.domains();
    if domains.len() < 2 {
        return Err(Error::Data("cross-domain runs need at least two domains".into()));
    }
    if spec.pairs.is_empty() {
        return Ok(domains
            .iter()
            .flat_map(|s| domains.iter().filter(move |t| *t != s).map(move |t| (s.clone(), t.clone())))
            .collect());
    }
    Ok(spec.pairs.clone())
}

/// One edited row per ordered (source, target) pair, tested strictly on the
/// target's test split.
pub fn run_out_of_domain<F: Scalar>(
    wb: &Workbench<F>,
    spec: &ExperimentSpec,
    log: &mut dyn FnMut(&RunResult),
) -> Result<Vec<ReportRow>> {
    spec.validate()?;
    let pairs = cross_domain_pairs(wb, spec)?;
    let mut rows = Vec::new();
    for (s, t) in &pairs {
        let data = wb.pair_data(s, t, spec.test_fraction)?;
        if data.source == data.target {
            return Err(Error::invalid(
                "domain pair",
                format!("{} is an in-domain pair; use the in-domain experiment", pair_tag(s, t)),
            ));
        }
        rows.push(run_seeds(wb, &data, &spec.edit, &spec.seeds, "out-of-domain", log)?);
    }
    Ok(rows)
}

/// One row per band on the in-domain pair of `domain`, every other edit
/// setting fixed.
pub fn ablate_layers<F: Scalar>(
    wb: &Workbench<F>,
    spec: &ExperimentSpec,
    domain: &str,
    bands: &[LayerBand],
    log: &mut dyn FnMut(&RunResult),
) -> Result<Vec<ReportRow>> {
    spec.validate()?;
    let n = wb.model.config.n_layers;
    let resolved: Vec<Vec<usize>> = bands.iter().map(|b| b.resolve(n)).collect::<Result<_>>()?;
    let custom: Vec<&Vec<usize>> = bands
        .iter()
        .zip(&resolved)
        .filter(|(b, _)| matches!(b, LayerBand::List(_)))
        .map(|(_, r)| r)
        .collect();
    for (i, a) in custom.iter().enumerate() {
        if let Some(b) = custom[i + 1..].iter().find(|b| b.iter().any(|l| a.contains(l))) {
            return Err(Error::invalid("layer bands", format!("custom bands {a:?} and {b:?} overlap")));
        }
    }
    let data = wb.pair_data(domain, domain, spec.test_fraction)?;
    bands
        .iter()
        .map(|b| {
            let edit = EditSpec {
                layers: b.clone(),
                ..spec.edit.clone()
            };
            run_seeds(wb, &data, &edit, &spec.seeds, &format!("layers-{b}"), log)
        })
        .collect()
}

/// One row per position policy on the in-domain pair of `domain`.
pub fn ablate_positions<F: Scalar>(
    wb: &Workbench<F>,
    spec: &ExperimentSpec,
    domain: &str,
    policies: &[PositionPolicy],
    log: &mut dyn FnMut(&RunResult),
) -> Result<Vec<ReportRow>> {
    spec.validate()?;
    if spec.edit.rank_rep == 0 {
        return Err(Error::invalid("position ablation", "needs a representation edit (rank_rep > 0)"));
    }
    let data = wb.pair_data(domain, domain, spec.test_fraction)?;
    policies
        .iter()
        .map(|&policy| {
            let edit = EditSpec {
                policy,
                ..spec.edit.clone()
            };
            run_seeds(wb, &data, &edit, &spec.seeds, &format!("positions-{policy}"), log)
        })
        .collect()
}
