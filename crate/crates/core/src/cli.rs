//! Command-line front end: `generate`, `partition`, `train` and `eval`.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::baselines::DenoiseStrategy;
use crate::corpus::{self, Dataset, PartitionManifest, SyntheticSpec, Vocab, DEFAULT_MAX_LEN};
use crate::encoder::{self, Hyper, ModelParams};
use crate::error::{Error, Result};
use crate::evaluation::{self, EvalReport};
use crate::federation::{self, Evaluator, JsonlSink, MessageSink, NullSink, RoundConfig, TrainOptions, TrainingOutcome};

#[derive(Debug, Parser)]
#[command(name = "fedds", version, about = "Federated distantly-supervised relation extraction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic train/test corpus and its relation list.
    Generate(GenerateArgs),
    /// Shuffle a corpus into K platform shards.
    Partition(PartitionArgs),
    /// Run federated training from a config file.
    Train(TrainArgs),
    /// Score a checkpoint on a held-out set.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Synthetic spec (TOML); defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PartitionArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub relations: PathBuf,
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
    pub max_len: usize,
    /// Manifest JSON to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `federation.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run platforms one after another instead of in parallel.
    #[arg(long)]
    pub serial: bool,
    /// Record every protocol message to `messages.jsonl`.
    #[arg(long)]
    pub log_messages: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub relations: PathBuf,
    /// Training vocabulary; defaults to `vocab.txt` beside the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep only the first N ranks in the PR curve CSV.
    #[arg(long)]
    pub top: Option<usize>,
}

/// Encoder settings; the relation count comes from the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub word_dim: usize,
    pub pos_dim: usize,
    pub filters: usize,
    pub window: usize,
    pub max_len: usize,
    pub pos_clip: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let h = Hyper::default();
        ModelConfig {
            word_dim: h.word_dim,
            pos_dim: h.pos_dim,
            filters: h.filters,
            window: h.window,
            max_len: h.max_len,
            pos_clip: h.pos_clip,
        }
    }
}

impl ModelConfig {
    pub fn hyper(&self, num_relations: usize) -> Hyper {
        Hyper {
            word_dim: self.word_dim,
            pos_dim: self.pos_dim,
            filters: self.filters,
            window: self.window,
            num_relations,
            max_len: self.max_len,
            pos_clip: self.pos_clip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    pub relations: PathBuf,
    /// Partition manifest; an IID partition with `federation.seed` is made when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub strategy: DenoiseStrategy,
    /// Rounds between held-out evaluations; 0 disables them.
    pub eval_every: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub federation: RoundConfig,
    pub model: ModelConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            strategy: DenoiseStrategy::LazyMil,
            eval_every: 5,
            out_dir: None,
            federation: RoundConfig::default(),
            model: ModelConfig::default(),
            data: None,
            synthetic: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Every violation, not just the first.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.federation.validate();
        errs.extend(self.model.hyper(1).validate());
        match (&self.data, &self.synthetic) {
            (Some(_), Some(_)) => errs.push("give either [data] or [synthetic], not both".into()),
            (None, None) => errs.push("one of [data] or [synthetic] is required".into()),
            (None, Some(spec)) => {
                if let Err(e) = spec.validate() {
                    errs.push(e.to_string());
                }
            }
            (Some(_), None) => {}
        }
        errs
    }

    /// Config with relative paths made absolute, for the echo file.
    pub fn resolved(&self) -> Result<Self> {
        let abs = |p: &Path| std::path::absolute(p).map_err(|e| Error::io(p, e));
        let mut out = self.clone();
        if let Some(d) = &mut out.data {
            d.train = abs(&d.train)?;
            d.relations = abs(&d.relations)?;
            if let Some(t) = &mut d.test {
                *t = abs(t)?;
            }
            if let Some(m) = &mut d.manifest {
                *m = abs(m)?;
            }
        }
        if let Some(o) = &mut out.out_dir {
            *o = abs(o)?;
        }
        Ok(out)
    }
}

/// Inputs of a training run after loading or generating the data.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Option<Dataset>,
    pub manifest: PartitionManifest,
    pub hyper: Hyper,
    pub warnings: Vec<String>,
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    let errs = config.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let mut warnings = Vec::new();
    let (train, test) = match (&config.data, &config.synthetic) {
        (Some(d), _) => {
            let loaded = corpus::load_dataset(&d.train, &d.relations, config.model.max_len)?;
            warnings.extend(loaded.warnings);
            let train = loaded.dataset;
            let test = match &d.test {
                Some(t) => {
                    let loaded = corpus::load_dataset_with_vocab(t, &d.relations, &train.vocab, config.model.max_len)?;
                    warnings.extend(loaded.warnings);
                    Some(loaded.dataset)
                }
                None => None,
            };
            (train, test)
        }
        (None, Some(spec)) => {
            let (train, test) = corpus::generate_synthetic_split(spec)?;
            (train, (!test.sentences.is_empty()).then_some(test))
        }
        (None, None) => unreachable!("validated"),
    };
    let manifest = match config.data.as_ref().and_then(|d| d.manifest.as_ref()) {
        Some(path) => PartitionManifest::read(path)?,
        None => corpus::partition_iid(&train, config.federation.platforms, config.federation.seed)?,
    };
    let hyper = config.model.hyper(train.num_relations());
    Ok(Prepared { train, test, manifest, hyper, warnings })
}

/// Runs training on prepared inputs, evaluating every `eval_every` rounds
/// when a test set is present.
pub fn train_prepared(
    config: &ExperimentConfig,
    prepared: &Prepared,
    serial: bool,
    sink: &mut dyn MessageSink,
) -> Result<TrainingOutcome> {
    let score = |p: &ModelParams| -> Result<f64> {
        let test = prepared.test.as_ref().expect("evaluator only set with a test set");
        Ok(evaluation::evaluate(p, test)?.report.auc)
    };
    let evaluator = (prepared.test.is_some() && config.eval_every > 0)
        .then_some(Evaluator { every: config.eval_every, score: &score });
    let mut options = TrainOptions { serial, sink, evaluator };
    federation::run_training(
        &config.federation,
        &prepared.hyper,
        &prepared.train,
        &prepared.manifest,
        config.strategy,
        &mut options,
    )
}

/// Final held-out report, including selection accuracy when the training
/// data carries ground truth and lazy MIL produced a selection.
pub fn final_report(prepared: &Prepared, outcome: &TrainingOutcome) -> Result<Option<(evaluation::Evaluation, EvalReport)>> {
    let Some(test) = &prepared.test else { return Ok(None) };
    let ev = evaluation::evaluate(&outcome.params, test)?;
    let mut report = ev.report.clone();
    if prepared.train.has_ground_truth() {
        if let Some(map) = &outcome.last_denoise {
            report.selection_accuracy = evaluation::selection_accuracy(map, &prepared.train, &outcome.shards).ok();
        }
    }
    Ok(Some((ev, report)))
}

/// Output files written under `.partial` names and renamed together once
/// everything succeeded.
struct Staged {
    dir: PathBuf,
    names: Vec<String>,
}

impl Staged {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Staged { dir: dir.to_owned(), names: Vec::new() })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.names.push(name.to_owned());
        self.dir.join(format!("{name}.partial"))
    }

    fn write(&mut self, name: &str, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
        let path = self.path(name);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        body(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(&path, e))
    }

    fn commit(self) -> Result<()> {
        for name in &self.names {
            let from = self.dir.join(format!("{name}.partial"));
            let to = self.dir.join(name);
            fs::rename(&from, &to).map_err(|e| Error::io(&to, e))?;
        }
        Ok(())
    }
}

fn write_json(w: &mut impl Write, value: &impl Serialize) -> std::io::Result<()> {
    serde_json::to_writer_pretty(&mut *w, value)?;
    writeln!(w)
}

pub fn cmd_generate(args: &GenerateArgs) -> anyhow::Result<()> {
    let mut spec = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str::<SyntheticSpec>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let (train, test) = corpus::generate_synthetic_split(&spec)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    corpus::write_jsonl(&train, &args.out.join("train.jsonl"))?;
    corpus::write_jsonl(&test, &args.out.join("test.jsonl"))?;
    corpus::write_relations(&train.relations, &args.out.join("relations.txt"))?;
    println!(
        "train: {} bags, {} sentences; test: {} bags, {} sentences; {} relations; vocab {}",
        train.kb.len(),
        train.sentences.len(),
        test.kb.len(),
        test.sentences.len(),
        train.relations.len(),
        train.vocab.len()
    );
    Ok(())
}

pub fn cmd_partition(args: &PartitionArgs) -> anyhow::Result<()> {
    let loaded = corpus::load_dataset(&args.dataset, &args.relations, args.max_len)?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    let manifest = corpus::partition_iid(&loaded.dataset, args.k, args.seed)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    manifest.write(&args.out)?;
    let mut sizes = vec![0usize; args.k];
    manifest.assignment.values().for_each(|&p| sizes[p] += 1);
    println!(
        "{} sentences over {} platforms (min {}, max {})",
        manifest.assignment.len(),
        args.k,
        sizes.iter().min().unwrap_or(&0),
        sizes.iter().max().unwrap_or(&0)
    );
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> anyhow::Result<()> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.federation.seed = seed;
    }
    if let Some(out) = &args.out {
        config.out_dir = Some(out.clone());
    }
    let Some(out_dir) = config.out_dir.clone() else {
        bail!("no output directory: set out_dir in the config or pass --out");
    };
    let config = config.resolved()?;
    let prepared = prepare(&config)?;
    for w in &prepared.warnings {
        eprintln!("warning: {w}");
    }

    let mut staged = Staged::new(&out_dir)?;
    let outcome = if args.log_messages {
        let path = staged.path("messages.jsonl");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut sink = JsonlSink::new(BufWriter::new(file));
        let outcome = train_prepared(&config, &prepared, args.serial, &mut sink)?;
        sink.into_inner().flush().map_err(|e| Error::io(&path, e))?;
        outcome
    } else {
        train_prepared(&config, &prepared, args.serial, &mut NullSink)?
    };

    encoder::write_checkpoint(&outcome.params, &staged.path("checkpoint.bin"))?;
    staged.write("metrics.csv", |w| federation::write_metrics_csv(&outcome.history, w))?;
    staged.write("vocab.txt", |w| {
        prepared.train.vocab.tokens().iter().try_for_each(|t| writeln!(w, "{t}"))
    })?;
    staged.write("relations.txt", |w| prepared.train.relations.iter().try_for_each(|r| writeln!(w, "{r}")))?;
    staged.write("manifest.json", |w| write_json(w, &prepared.manifest))?;
    let echo = config.to_toml();
    staged.write("resolved_config.toml", |w| w.write_all(echo.as_bytes()))?;
    let report = final_report(&prepared, &outcome)?;
    if let Some((ev, report)) = &report {
        staged.write("report.json", |w| write_json(w, report))?;
        staged.write("pr_curve.csv", |w| evaluation::write_pr_csv(&ev.predictions, &ev.points, None, w))?;
    }
    staged.commit()?;

    let last = outcome.history.last();
    println!(
        "{} rounds, strategy {}, final mean loss {}",
        outcome.history.len(),
        config.strategy,
        last.and_then(|s| s.mean_loss).map_or("n/a".into(), |l| format!("{l:.4}"))
    );
    if let Some((_, r)) = &report {
        println!("auc {:.4}, P@100 {:.3}, P@200 {:.3}, P@300 {:.3}", r.auc, r.p_at.p100, r.p_at.p200, r.p_at.p300);
        if let Some(acc) = r.selection_accuracy {
            println!("selection accuracy {acc:.4}");
        }
    }
    println!("outputs in {}", out_dir.display());
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> anyhow::Result<()> {
    let params = encoder::read_checkpoint(&args.checkpoint)?;
    let vocab_path = match &args.vocab {
        Some(v) => v.clone(),
        None => args.checkpoint.with_file_name("vocab.txt"),
    };
    let vocab = Vocab::read(&vocab_path)?;
    if vocab.len() != params.vocab_size {
        bail!(
            "vocabulary {} has {} tokens but the checkpoint was trained with {}",
            vocab_path.display(),
            vocab.len(),
            params.vocab_size
        );
    }
    let loaded = corpus::load_dataset_with_vocab(&args.test, &args.relations, &vocab, params.hyper.max_len)?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    let test = loaded.dataset;
    if test.num_relations() != params.hyper.num_relations {
        bail!(
            "relations file lists {} relations but the checkpoint scores {}",
            test.num_relations(),
            params.hyper.num_relations
        );
    }
    let ev = evaluation::evaluate(&params, &test)?;
    let mut staged = Staged::new(&args.out)?;
    staged.write("report.json", |w| write_json(w, &ev.report))?;
    staged.write("pr_curve.csv", |w| evaluation::write_pr_csv(&ev.predictions, &ev.points, args.top, w))?;
    staged.commit()?;
    let r = &ev.report;
    println!("auc {:.4}, P@100 {:.3}, P@200 {:.3}, P@300 {:.3}, mean {:.3}", r.auc, r.p_at.p100, r.p_at.p200, r.p_at.p300, r.p_at.mean);
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Partition(a) => cmd_partition(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

/// Strings a message log may legitimately contain: entity names and
/// relation names from the knowledge base.
pub fn public_names(dataset: &Dataset) -> BTreeSet<String> {
    let mut names: BTreeSet<String> = dataset.relations.iter().cloned().collect();
    for t in &dataset.kb {
        names.insert(t.head.clone());
        names.insert(t.tail.clone());
    }
    names
}
