// SPDX-License-Identifier: MIT OR Apache-2.0

//! `tracedit`: data generation, base training, causal tracing, edit training
//! and the experiment sweeps, each writing its outputs under `--out-dir`.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use tracedit_core::data::{
    build_vocab, contrastive_mask, domain_counts, generate_corpus, is_test_sample, read_corpus, render_all,
    resolve_domain, write_corpus, Sample,
};
use tracedit_core::editing::{count_params, EditSuite, PositionPolicy};
use tracedit_core::harness::{
    ablate_layers, ablate_positions, base_training_set, baseline_rows, read_rows, render_table, run_edit_with_suite, run_in_domain,
    run_out_of_domain, write_report, BaseSubset, EditSpec, ExperimentSpec, LayerBand, ReportRow, RunResult, Workbench,
};
use tracedit_core::model::{load_model, save_model, train_base_observed, Model, ModelConfig};
use tracedit_core::trace::{aggregate, band_contrast, draw_samples, export_heatmap, trace_all, NoiseScope};
use tracedit_core::train_eval::evaluate_accuracy;
use tracedit_core::Scalar;

use config::{FileConfig, Manifest};

#[derive(Parser, Debug)]
#[command(name = "tracedit", version, about = "Causal tracing and targeted editing of small transformers")]
struct Cli {
    /// JSON file with default settings; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus.
    GenData(GenDataArgs),
    /// Train a base model on the corpus training split.
    TrainBase(TrainBaseArgs),
    /// Trace indirect effects and write the heatmap tables.
    Trace(TraceArgs),
    /// Train one edit suite.
    Edit(EditArgs),
    /// Evaluate a base model, optionally with an edit suite attached.
    Eval(EvalArgs),
    /// Train and test within each domain, next to the unedited baseline.
    InDomain(SweepArgs),
    /// Train on one domain and test on another, for every ordered pair.
    Ood(OodArgs),
    /// Compare layer bands at fixed edit settings.
    AblateLayers(AblateLayersArgs),
    /// Compare position policies at fixed edit settings.
    AblatePositions(AblatePositionsArgs),
    /// Collect every `rows-*.json` under a directory into one report.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Corpus path (JSON lines); defaults to `<out-dir>/corpus.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    per_domain: Option<usize>,
    #[arg(long)]
    contrastive_fraction: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
enum Subset {
    /// Every training sample.
    All,
    /// Training samples whose sentence carries a single label.
    Plain,
}

#[derive(Args, Debug)]
struct TrainBaseArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint path; defaults to `<out-dir>/base.ckpt`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Subset::All)]
    subset: Subset,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    label_weight: Option<f64>,
    #[arg(long)]
    min_accuracy: Option<f64>,
}

#[derive(Args, Debug)]
struct Inputs {
    /// Base model checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Args, Debug)]
struct TraceArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    noise_scale: Option<f64>,
    #[arg(long)]
    noise_scope: Option<NoiseScope>,
    /// Restrict the draw to one domain's test split.
    #[arg(long)]
    domain: Option<String>,
    /// Draw only from sentences that carry two differently labelled aspects.
    #[arg(long)]
    contrastive: bool,
    /// Bootstrap resamples for the band contrast.
    #[arg(long, default_value_t = 1000)]
    resamples: usize,
    /// Layer band compared in the summary.
    #[arg(long, default_value = "mid")]
    band: LayerBand,
}

#[derive(Args, Debug, Default)]
struct EditFlags {
    #[arg(long)]
    layers: Option<LayerBand>,
    #[arg(long)]
    positions: Option<PositionPolicy>,
    #[arg(long)]
    rank_w: Option<usize>,
    #[arg(long)]
    rank_rep: Option<usize>,
    #[arg(long)]
    lr_w: Option<f64>,
    #[arg(long)]
    lr_rep: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args, Debug)]
struct EditArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long)]
    domain: String,
    /// Test domain; defaults to the training domain.
    #[arg(long)]
    target: Option<String>,
    #[command(flatten)]
    edit: EditFlags,
    /// Suite path; defaults to `<out-dir>/suite.ckpt`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long)]
    suite: Option<PathBuf>,
    #[arg(long)]
    domain: String,
    #[arg(long)]
    target: Option<String>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    edit: EditFlags,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated domain list; defaults to every corpus domain.
    #[arg(long, value_delimiter = ',')]
    domains: Option<Vec<String>>,
}

#[derive(Args, Debug)]
struct OodArgs {
    #[command(flatten)]
    sweep: SweepArgs,
    /// Ordered pairs as `source:target`, comma-separated; defaults to all.
    #[arg(long, value_delimiter = ',')]
    pairs: Option<Vec<String>>,
}

#[derive(Args, Debug)]
struct AblateLayersArgs {
    #[command(flatten)]
    sweep: SweepArgs,
    #[arg(long)]
    domain: String,
    /// Bands separated by `;`, each a name or a comma list.
    #[arg(long, value_delimiter = ';', default_value = "early;mid;late;all")]
    bands: Vec<LayerBand>,
}

#[derive(Args, Debug)]
struct AblatePositionsArgs {
    #[command(flatten)]
    sweep: SweepArgs,
    #[arg(long)]
    domain: String,
    #[arg(long, value_delimiter = ',', default_value = "aspect,last,mid")]
    policies: Vec<PositionPolicy>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Directory searched for `rows-*.json`; defaults to `--out-dir`.
    #[arg(long)]
    inputs: Option<PathBuf>,
}

/// Bad input from the user: exit code 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e.chain().any(|c| {
                c.downcast_ref::<Usage>().is_some()
                    || c.downcast_ref::<tracedit_core::Error>().is_some_and(|e| e.is_validation())
            });
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(&need(path)?)?,
        None => FileConfig::default(),
    };
    fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    match cli.precision {
        Precision::F32 => dispatch::<f32>(&cli, file),
        Precision::F64 => dispatch::<f64>(&cli, file),
    }
}

fn need(path: &Path) -> Result<PathBuf> {
    if path.exists() {
        Ok(path.to_path_buf())
    } else {
        Err(usage(format!("input file {} does not exist", path.display())))
    }
}

fn dispatch<F: Scalar>(cli: &Cli, file: FileConfig) -> Result<()> {
    let ctx = Ctx { cli, file };
    match &cli.command {
        Command::GenData(a) => ctx.gen_data(a),
        Command::TrainBase(a) => ctx.train_base::<F>(a),
        Command::Trace(a) => ctx.trace::<F>(a),
        Command::Edit(a) => ctx.edit::<F>(a),
        Command::Eval(a) => ctx.eval::<F>(a),
        Command::InDomain(a) => ctx.in_domain::<F>(a),
        Command::Ood(a) => ctx.ood::<F>(a),
        Command::AblateLayers(a) => ctx.ablate_layers::<F>(a),
        Command::AblatePositions(a) => ctx.ablate_positions::<F>(a),
        Command::Report(a) => ctx.report(a),
    }
}

struct Ctx<'a> {
    cli: &'a Cli,
    file: FileConfig,
}

fn print_run(r: &RunResult) {
    eprintln!(
        "  {}->{} layers {:?} {} seed {}: accuracy {:.4} contrastive {:.4} ({:.1}s)",
        r.source, r.target, r.layers, r.policy, r.seed, r.accuracy, r.contrastive_accuracy, r.metrics.runtime_secs
    );
}

impl Ctx<'_> {
    fn out(&self, name: &str) -> PathBuf {
        self.cli.out_dir.join(name)
    }

    fn record(&self, command: &str, entry: serde_json::Value) -> Result<()> {
        let path = self.out("manifest.json");
        let mut manifest = Manifest::load_or_default(&path)?;
        manifest.commands.insert(
            command.to_string(),
            json!({
                "precision": self.cli.precision,
                "seed": self.cli.seed,
                "config_file": self.cli.config,
                "resolved": entry,
            }),
        );
        manifest.save(&path)
    }

    fn write_json(&self, path: &Path, value: &impl serde::Serialize) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
    }

    fn gen_data(&self, a: &GenDataArgs) -> Result<()> {
        let mut spec = self.file.corpus.clone();
        if let Some(n) = a.per_domain {
            spec.per_domain = n;
        }
        if let Some(f) = a.contrastive_fraction {
            spec.contrastive_fraction = f;
        }
        if let Some(s) = self.cli.seed {
            spec.seed = s;
        }
        let path = a.out.clone().unwrap_or_else(|| self.out("corpus.jsonl"));
        let corpus = generate_corpus(&spec)?;
        write_corpus(&path, &corpus)?;
        let counts = domain_counts(&corpus);
        for (d, n) in &counts {
            println!("{d}\t{n}");
        }
        println!("total\t{}", corpus.len());
        self.record("gen-data", json!({ "corpus": spec, "out": path, "counts": counts }))
    }

    fn corpus(&self, path: &Path) -> Result<Vec<Sample>> {
        Ok(read_corpus(&need(path)?)?)
    }

    fn load<F: Scalar>(&self, inputs: &Inputs) -> Result<Workbench<F>> {
        let ck = load_model::<F>(&need(&inputs.model)?)?;
        let template = match ck.info.get("template") {
            Some(t) => serde_json::from_value(t.clone()).context("template stored in the checkpoint")?,
            None => self.file.template.clone(),
        };
        Ok(Workbench {
            model: ck.model,
            vocab: ck.vocab,
            corpus: self.corpus(&inputs.corpus)?,
            template,
        })
    }

    fn train_base<F: Scalar>(&self, a: &TrainBaseArgs) -> Result<()> {
        let corpus = self.corpus(&a.corpus)?;
        let mut config = self.file.base;
        if let Some(v) = a.epochs {
            config.epochs = v;
        }
        if let Some(v) = a.lr {
            config.lr = v;
        }
        if let Some(v) = a.batch_size {
            config.batch_size = v;
        }
        if let Some(v) = a.label_weight {
            config.label_weight = v;
        }
        if let Some(v) = a.min_accuracy {
            config.min_accuracy = v;
        }
        if let Some(s) = self.cli.seed {
            config.seed = s;
        }
        let template = self.file.template.clone();
        let vocab = build_vocab(&corpus, &template, None)?;
        let mut model_config = self.file.model.unwrap_or_else(|| ModelConfig::desk_scale(vocab.len()));
        model_config.vocab_size = vocab.len();
        let test_fraction = self.file.experiment.test_fraction;
        let subset = match a.subset {
            Subset::All => BaseSubset::All,
            Subset::Plain => BaseSubset::Plain,
        };
        let train = base_training_set(&corpus, test_fraction, subset);
        let prompts = render_all(&train, &vocab, &template, model_config.max_seq)?;
        let mut model = Model::<F>::init(model_config)?;
        eprintln!(
            "training {} parameters on {} prompts for {} epochs",
            model_config.param_count(),
            prompts.len(),
            config.epochs
        );
        let started = Instant::now();
        let report = train_base_observed(&mut model, &prompts, &config, |epoch, loss, _| {
            eprintln!("  epoch {epoch} loss {loss:.4} ({:.0}s)", started.elapsed().as_secs_f64());
        })?;
        println!("train accuracy {:.4}", report.train_accuracy);
        let path = a.out.clone().unwrap_or_else(|| self.out("base.ckpt"));
        let info = json!({ "template": template, "subset": a.subset, "train": config, "report": report });
        save_model(&path, &model, &vocab, info)?;
        self.write_json(&self.out("base-train.json"), &report)?;
        self.record(
            "train-base",
            json!({ "corpus": a.corpus, "out": path, "subset": a.subset, "model": model_config, "train": config,
                    "template": template, "test_fraction": test_fraction }),
        )
    }

    fn trace<F: Scalar>(&self, a: &TraceArgs) -> Result<()> {
        let wb = self.load::<F>(&a.inputs)?;
        let mut noise = self.file.noise;
        if let Some(v) = a.noise_scale {
            noise.scale = v;
        }
        if let Some(v) = a.noise_scope {
            noise.scope = v;
        }
        if let Some(s) = self.cli.seed {
            noise.seed = s;
        }
        noise.validate()?;
        let n = a.samples.unwrap_or(self.file.trace_samples);
        let test_fraction = self.file.experiment.test_fraction;
        let domain = a.domain.as_deref().map(|d| resolve_domain(d, &wb.corpus)).transpose()?;
        let mask = contrastive_mask(&wb.corpus);
        let pool: Vec<Sample> = wb
            .corpus
            .iter()
            .zip(&mask)
            .filter(|(s, &c)| {
                is_test_sample(s, test_fraction)
                    && domain.as_ref().is_none_or(|d| &s.domain == d)
                    && (c || !a.contrastive)
            })
            .map(|(s, _)| s.clone())
            .collect();
        let prompts = render_all(&pool, &wb.vocab, &wb.template, wb.model.config.max_seq)?;
        let sample_seed = noise.seed;
        let drawn = draw_samples(&prompts, n, sample_seed);
        if drawn.is_empty() {
            return Err(usage("no test samples to trace"));
        }
        let started = Instant::now();
        let grids = trace_all(&wb.model, &drawn, &noise, |k| {
            if (k + 1) % 50 == 0 {
                eprintln!("  traced {} / {} ({:.0}s)", k + 1, drawn.len(), started.elapsed().as_secs_f64());
            }
        })?;
        let summary = aggregate(&grids, &drawn)?;
        let heatmap = self.out("heatmap.csv");
        let files = export_heatmap(&summary, &noise, sample_seed, &heatmap)?;
        let band = a.band.resolve(wb.model.config.n_layers)?;
        let contrast = band_contrast(&grids, &drawn, &band, a.resamples, sample_seed)?;
        println!("ATE {:.4} over {} retained of {}", summary.ate, summary.n_retained, summary.n_total);
        println!(
            "band {:?}: aspect {:.4} other {:.4} difference {:.4} (bootstrap SE {:.4})",
            band, contrast.aspect, contrast.other, contrast.difference, contrast.std_error
        );
        for f in &files {
            println!("wrote {}", f.display());
        }
        self.write_json(&self.out("trace-contrast.json"), &json!({ "band": band, "contrast": contrast }))?;
        self.record(
            "trace",
            json!({ "model": a.inputs.model, "corpus": a.inputs.corpus, "noise": noise, "samples": n,
                    "domain": domain, "contrastive": a.contrastive, "band": band, "resamples": a.resamples, "test_fraction": test_fraction }),
        )
    }

    fn edit_spec(&self, f: &EditFlags) -> EditSpec {
        let mut e = self.file.experiment.edit.clone();
        if let Some(v) = &f.layers {
            e.layers = v.clone();
        }
        if let Some(v) = f.positions {
            e.policy = v;
        }
        if let Some(v) = f.rank_w {
            e.rank_w = v;
        }
        if let Some(v) = f.rank_rep {
            e.rank_rep = v;
        }
        if let Some(v) = f.lr_w {
            e.train.lr_w = v;
        }
        if let Some(v) = f.lr_rep {
            e.train.lr_rep = v;
        }
        if let Some(v) = f.epochs {
            e.train.epochs = v;
        }
        if let Some(v) = f.batch_size {
            e.train.batch_size = v;
        }
        e
    }

    fn edit<F: Scalar>(&self, a: &EditArgs) -> Result<()> {
        let wb = self.load::<F>(&a.inputs)?;
        let spec = self.edit_spec(&a.edit);
        let seed = self.cli.seed.unwrap_or(0);
        let target = a.target.as_deref().unwrap_or(&a.domain);
        let data = wb.pair_data(&a.domain, target, self.file.experiment.test_fraction)?;
        let (result, suite) = run_edit_with_suite(&wb, &data, &spec, seed)?;
        print_run(&result);
        let path = a.out.clone().unwrap_or_else(|| self.out("suite.ckpt"));
        suite.save(&path)?;
        self.write_json(&self.out("edit-metrics.json"), &result)?;
        println!("wrote {}", path.display());
        self.record(
            "edit",
            json!({ "model": a.inputs.model, "corpus": a.inputs.corpus, "source": data.source, "target": data.target,
                    "edit": spec, "seed": seed, "out": path }),
        )
    }

    fn eval<F: Scalar>(&self, a: &EvalArgs) -> Result<()> {
        let wb = self.load::<F>(&a.inputs)?;
        let suite = a.suite.as_ref().map(|p| need(p).and_then(|p| Ok(EditSuite::<F>::load(&p)?))).transpose()?;
        let target = a.target.as_deref().unwrap_or(&a.domain);
        let data = wb.pair_data(&a.domain, target, self.file.experiment.test_fraction)?;
        let test = evaluate_accuracy(&wb.model, suite.as_ref(), &data.test)?;
        let contrastive = if data.contrastive.is_empty() {
            None
        } else {
            Some(evaluate_accuracy(&wb.model, suite.as_ref(), &data.contrastive)?)
        };
        let params = suite.as_ref().map(|s| count_params(s, wb.model.config.param_count()));
        let report = json!({
            "source": data.source,
            "target": data.target,
            "test": test,
            "contrastive": contrastive,
            "trainable": params.map(|p| p.trainable),
            "trainable_fraction": params.map(|p| p.fraction),
        });
        println!("{}", serde_json::to_string_pretty(&report)?);
        self.write_json(&self.out("eval.json"), &report)?;
        self.record(
            "eval",
            json!({ "model": a.inputs.model, "corpus": a.inputs.corpus, "suite": a.suite, "source": data.source,
                    "target": data.target }),
        )
    }

    fn experiment(&self, a: &SweepArgs) -> ExperimentSpec {
        let mut spec = self.file.experiment.clone();
        spec.edit = self.edit_spec(&a.edit);
        if let Some(s) = &a.seeds {
            spec.seeds = s.clone();
        } else if let Some(s) = self.cli.seed {
            spec.seeds = vec![s];
        }
        if let Some(d) = &a.domains {
            spec.domains = d.clone();
        }
        spec
    }

    fn finish(&self, name: &str, rows: &[ReportRow], inputs: &Inputs, resolved: serde_json::Value) -> Result<()> {
        print!("{}", render_table(rows));
        let files = write_report(rows, &self.cli.out_dir, &format!("rows-{name}"))?;
        for f in &files {
            println!("wrote {}", f.display());
        }
        self.record(
            name,
            json!({ "model": inputs.model, "corpus": inputs.corpus, "experiment": resolved }),
        )
    }

    fn in_domain<F: Scalar>(&self, a: &SweepArgs) -> Result<()> {
        let wb = self.load::<F>(&a.inputs)?;
        let spec = self.experiment(a);
        let mut rows = baseline_rows(&wb, &spec)?;
        rows.extend(run_in_domain(&wb, &spec, &mut print_run)?);
        self.finish("in-domain", &rows, &a.inputs, json!(spec))
    }

    fn ood<F: Scalar>(&self, a: &OodArgs) -> Result<()> {
        let wb = self.load::<F>(&a.sweep.inputs)?;
        let mut spec = self.experiment(&a.sweep);
        if let Some(pairs) = &a.pairs {
            spec.pairs = pairs
                .iter()
                .map(|p| match p.split_once(':') {
                    Some((s, t)) => Ok((s.to_string(), t.to_string())),
                    None => Err(usage(format!("pair `{p}` is not of the form source:target"))),
                })
                .collect::<Result<_>>()?;
        }
        let rows = run_out_of_domain(&wb, &spec, &mut print_run)?;
        self.finish("ood", &rows, &a.sweep.inputs, json!(spec))
    }

    fn ablate_layers<F: Scalar>(&self, a: &AblateLayersArgs) -> Result<()> {
        let wb = self.load::<F>(&a.sweep.inputs)?;
        let spec = self.experiment(&a.sweep);
        let rows = ablate_layers(&wb, &spec, &a.domain, &a.bands, &mut print_run)?;
        let bands: Vec<String> = a.bands.iter().map(|b| b.to_string()).collect();
        self.finish(
            "ablate-layers",
            &rows,
            &a.sweep.inputs,
            json!({ "spec": spec, "domain": a.domain, "bands": bands }),
        )
    }

    fn ablate_positions<F: Scalar>(&self, a: &AblatePositionsArgs) -> Result<()> {
        let wb = self.load::<F>(&a.sweep.inputs)?;
        let spec = self.experiment(&a.sweep);
        let rows = ablate_positions(&wb, &spec, &a.domain, &a.policies, &mut print_run)?;
        self.finish(
            "ablate-positions",
            &rows,
            &a.sweep.inputs,
            json!({ "spec": spec, "domain": a.domain, "policies": a.policies }),
        )
    }

    fn report(&self, a: &ReportArgs) -> Result<()> {
        let dir = a.inputs.clone().unwrap_or_else(|| self.cli.out_dir.clone());
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("rows-") && n.ends_with(".json"))
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(usage(format!("no rows-*.json files in {}", dir.display())));
        }
        let mut rows = Vec::new();
        for f in &files {
            rows.extend(read_rows(f)?);
        }
        print!("{}", render_table(&rows));
        let written = write_report(&rows, &self.cli.out_dir, "report")?;
        for f in &written {
            println!("wrote {}", f.display());
        }
        self.record("report", json!({ "inputs": files }))
    }
}
