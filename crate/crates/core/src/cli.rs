//! The `ged` command line.
//!
//! Every command writes its declared artifacts plus a JSON manifest naming
//! the arguments, configuration hash, inputs, outputs and a summary.
//! Manifests carry no timestamps, so identical runs write identical files.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use crate::compute::{set_corrupt_tanh_gradient, GradCheckOptions};
use crate::config::RunConfig;
use crate::corpus::{CorpusError, ErrorRule, Token, Tokenizer};
use crate::diagnostics::{run_checks, CheckTarget};
use crate::eval::{ensemble_vote_with, score, EvalError, Metrics, PredictionSet};
use crate::cnnclassifier::{tune_threshold, ThresholdRow};
use crate::error::ModelError;
use crate::inference::{sweep_table, GridSpec, SweepRow, TagBias, TuneResult};
use crate::pipeline::{
    prepare, read_annotated, read_annotated_lenient, read_file, sentence_id, synth_splits, train_model, write_annotated, write_file, Dataset,
    LoadedRun, Model, RunDir, Splits, SynthSpec, TrainRunOptions,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Usage(String),
    #[error("gradient check failed: {failed} of {total} checks over tolerance")]
    GradCheckFailed { failed: usize, total: usize },
}

#[derive(Debug, Parser)]
#[command(name = "ged", version, about = "Sentence-level grammatical error detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a dataset directory from annotated train/dev/test files.
    Prepare(PrepareArgs),
    /// Generate a synthetic annotated corpus.
    Synth(SynthArgs),
    /// Train a model on a prepared dataset.
    Train(TrainArgs),
    /// Label sentences with a trained model.
    Decode(DecodeArgs),
    /// Search tag biases (or the classifier threshold) for the best F1.
    Tune(TuneArgs),
    /// Score predictions against gold labels.
    Score(ScoreArgs),
    /// Majority vote over several prediction files.
    Ensemble(EnsembleArgs),
    /// Emit the precision/recall sweep as a plot-ready table.
    SweepPlotData(SweepArgs),
    /// Finite-difference check of every operation and the composed models.
    GradCheck(GradCheckArgs),
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_kv)]
    pub set: Vec<(String, String)>,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Run the default tokenizer over each line before parsing.
    #[arg(long)]
    pub tokenize: bool,
    /// Fail on the first malformed line instead of logging it to
    /// `rejected.jsonl` and continuing.
    #[arg(long)]
    pub strict: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 5000)]
    pub train: usize,
    #[arg(long, default_value_t = 1000)]
    pub dev: usize,
    #[arg(long, default_value_t = 0)]
    pub test: usize,
    /// Probability that a sentence receives an error.
    #[arg(long, default_value_t = 0.5)]
    pub rate: f64,
    /// Comma-separated rule names, or `all`.
    #[arg(long, default_value = "all")]
    pub rules: String,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output directory for `train.txt`, `dev.txt` and `test.txt`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModelArg {
    Word,
    Char,
    Cnn,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PresetArg {
    Desk,
    Full,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Prepared dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Continue from the newest checkpoint in the run directory.
    #[arg(long)]
    pub resume: bool,
    /// Pretrained word vectors (`token v1 … vm` per line).
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// Classifier only: do not add corrected sentences as error-free examples.
    #[arg(long)]
    pub no_corrections: bool,
    /// Validate on at most this many dev sentences.
    #[arg(long)]
    pub valid_limit: Option<usize>,
    #[arg(long)]
    pub quiet: bool,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelSource {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Checkpoint to load instead of the run's `best.ckpt`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Override a decoding key such as `beam` or `tag_bias` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_kv)]
    pub set: Vec<(String, String)>,
}

#[derive(Debug, Args)]
pub struct SentenceSource {
    /// Prepared dataset directory.
    #[arg(long, requires = "split", conflicts_with = "input")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    /// Plain text, one sentence per line.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Tokenize `--input` lines with the default tokenizer.
    #[arg(long)]
    pub tokenize: bool,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub model: ModelSource,
    #[command(flatten)]
    pub sentences: SentenceSource,
    /// Tag bias: one value for all four tags or four comma-separated values.
    #[arg(long, allow_hyphen_values = true)]
    pub bias: Option<String>,
    /// Take the bias (or threshold) from a `tune` result file.
    #[arg(long, conflicts_with_all = ["bias", "threshold"])]
    pub bias_from: Option<PathBuf>,
    /// Classifier decision threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Output prefix: `<out>.tsv`, `<out>.jsonl`, `<out>.manifest.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub model: ModelSource,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "dev")]
    pub split: String,
    /// Uniform grid `lo:hi:step` (default -2:4:0.5, or 0.05:0.95:0.05 for the classifier).
    #[arg(long, allow_hyphen_values = true)]
    pub grid: Option<String>,
    /// Per-tag deltas tried around the best uniform point.
    #[arg(long, allow_hyphen_values = true, default_value = "-1,-0.5,0.5,1")]
    pub refine: String,
    /// Output prefix: `<out>.json`, `<out>.sweep.tsv`, `<out>.manifest.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    /// Output prefix (default: the prediction file with `.score`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TieArg {
    Positive,
    Negative,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    /// Prediction files, one per system (repeatable).
    #[arg(long = "pred", required = true)]
    pub preds: Vec<PathBuf>,
    /// Label given to sentences with an even split of votes.
    #[arg(long, value_enum, default_value = "positive")]
    pub tie: TieArg,
    /// Also score the vote against these gold labels.
    #[arg(long)]
    pub gold: Option<PathBuf>,
    /// Output prefix: `<out>.tsv`, `<out>.manifest.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Read the sweep from a `tune` result instead of decoding.
    #[arg(long, conflicts_with_all = ["run", "data"])]
    pub from: Option<PathBuf>,
    #[arg(long, requires = "data")]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "dev")]
    pub split: String,
    #[arg(long, allow_hyphen_values = true)]
    pub grid: Option<String>,
    /// Output table; the manifest goes to `<out>.manifest.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CheckArg {
    Ops,
    Word,
    Char,
    Cnn,
    All,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub target: CheckArg,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Coordinates sampled per model parameter (operations are checked fully).
    #[arg(long, default_value_t = 12)]
    pub coords: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Negative control: break the tanh gradient rule.
    #[arg(long, hide = true)]
    pub corrupt_tanh: bool,
    /// Output prefix: `<out>.txt`, `<out>.manifest.json`.
    #[arg(long, default_value = "grad-check")]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct CommandManifest<'a> {
    command: &'a str,
    version: &'a str,
    args: &'a [String],
    config_hash: Option<String>,
    outputs: Vec<String>,
    summary: serde_json::Value,
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| ModelError::Config(format!("{}: {e}", dir.display())))?;
    }
    Ok(())
}

struct Recorder<'a> {
    command: &'a str,
    args: &'a [String],
    outputs: Vec<String>,
}

impl Recorder<'_> {
    fn write(&mut self, path: &Path, text: &str) -> Result<(), CliError> {
        ensure_parent(path)?;
        write_file(path, text)?;
        self.outputs.push(path.display().to_string());
        Ok(())
    }

    fn finish(self, path: &Path, config_hash: Option<String>, summary: serde_json::Value) -> Result<(), CliError> {
        let m = CommandManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            args: self.args,
            config_hash,
            outputs: self.outputs,
            summary,
        };
        ensure_parent(path)?;
        write_file(path, &(serde_json::to_string_pretty(&m).expect("serializable") + "\n"))?;
        Ok(())
    }
}

fn load_config(args: &ConfigArgs, base: &[String]) -> Result<RunConfig, CliError> {
    let mut text = base.join("\n");
    text.push('\n');
    if let Some(path) = &args.config {
        text.push_str(&read_file(path)?);
    }
    let mut c = RunConfig::parse(&text)?;
    c.apply_overrides(&args.set)?;
    Ok(c)
}

/// `x` for all four tags or `a,b,c,d`.
pub fn parse_bias(s: &str) -> Result<TagBias, CliError> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("bad bias `{s}`")))?;
    let b = match v[..] {
        [x] => TagBias::uniform(x),
        [a, b, c, d] => TagBias([a, b, c, d]),
        _ => return Err(CliError::Usage(format!("bias needs 1 or 4 values, got {}", v.len()))),
    };
    b.validate()?;
    Ok(b)
}

/// `lo:hi:step`, inclusive of `hi` when it lies on the grid.
pub fn parse_grid(s: &str) -> Result<Vec<f64>, CliError> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("bad grid `{s}`")))?;
    match parts[..] {
        [lo, hi, step] => Ok(GridSpec::range(lo, hi, step)?.uniform),
        _ => Err(CliError::Usage(format!("grid must be lo:hi:step, got `{s}`"))),
    }
}

fn parse_list(s: &str) -> Result<Vec<f64>, CliError> {
    if s.trim().is_empty() {
        return Ok(vec![]);
    }
    s.split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|_| CliError::Usage(format!("bad number `{x}` in `{s}`"))))
        .collect()
}

fn parse_rules(s: &str) -> Result<Vec<ErrorRule>, CliError> {
    if s == "all" {
        return Ok(ErrorRule::ALL.to_vec());
    }
    s.split(',')
        .map(|r| ErrorRule::parse(r.trim()).ok_or_else(|| CliError::Usage(format!("unknown rule `{r}`"))))
        .collect()
}

fn load_run(m: &ModelSource) -> Result<LoadedRun, CliError> {
    let mut run = RunDir::new(&m.run).load(m.checkpoint.as_deref())?;
    run.config.apply_overrides(&m.set)?;
    Ok(run)
}

fn sentences(src: &SentenceSource) -> Result<Vec<(String, Vec<Token>)>, CliError> {
    if let Some(path) = &src.input {
        let tok = Tokenizer::default_rules();
        let text = read_file(path)?;
        return text
            .lines()
            .enumerate()
            .map(|(i, line)| {
                let words: Vec<String> =
                    if src.tokenize { tok.tokenize(line) } else { line.split_whitespace().map(str::to_string).collect() };
                let toks = words
                    .into_iter()
                    .map(Token::new)
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| CorpusError::AtLine { line: i + 1, source: Box::new(e) })?;
                if toks.is_empty() {
                    return Err(CorpusError::AtLine { line: i + 1, source: Box::new(CorpusError::EmptyLine) }.into());
                }
                Ok((sentence_id("input", i), toks))
            })
            .collect();
    }
    match (&src.data, &src.split) {
        (Some(dir), Some(split)) => {
            let data = Dataset::load(dir)?;
            let s = data.sources(split);
            if s.is_empty() {
                return Err(CliError::Usage(format!("split `{split}` is empty or unknown")));
            }
            Ok(s)
        }
        _ => Err(CliError::Usage("give --input FILE or --data DIR --split NAME".into())),
    }
}

/// Runs one command. `args` is the raw argument list recorded in the
/// manifest.
pub fn run(cli: Cli, args: &[String]) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => synth(a, args),
        Command::Prepare(a) => prepare_cmd(a, args),
        Command::Train(a) => train_cmd(a, args),
        Command::Decode(a) => decode(a, args),
        Command::Tune(a) => tune(a, args),
        Command::Score(a) => score_cmd(a, args),
        Command::Ensemble(a) => ensemble(a, args),
        Command::SweepPlotData(a) => sweep(a, args),
        Command::GradCheck(a) => grad_check(a, args),
    }
}

fn synth(a: SynthArgs, args: &[String]) -> Result<(), CliError> {
    let spec = SynthSpec { train: a.train, dev: a.dev, test: a.test, rate: a.rate, rules: parse_rules(&a.rules)?, seed: a.seed };
    let splits = synth_splits(&spec)?;
    let mut rec = Recorder { command: "synth", args, outputs: vec![] };
    let mut counts = serde_json::Map::new();
    for (name, pairs) in splits.named() {
        if name == "test" && pairs.is_empty() {
            continue;
        }
        rec.write(&a.out.join(format!("{name}.txt")), &write_annotated(pairs))?;
        let errs = pairs.iter().filter(|p| p.label).count();
        counts.insert(name.into(), serde_json::json!({ "pairs": pairs.len(), "with_errors": errs }));
    }
    let rules: Vec<&str> = spec.rules.iter().map(|r| r.name()).collect();
    let summary = serde_json::json!({ "rate": spec.rate, "seed": spec.seed, "rules": rules, "splits": counts });
    rec.finish(&a.out.join("synth.manifest.json"), None, summary)
}

fn prepare_cmd(a: PrepareArgs, args: &[String]) -> Result<(), CliError> {
    let config = load_config(&a.config, &[])?;
    let mut rejected = String::new();
    let mut rejected_counts = serde_json::Map::new();
    let mut read = |split: &str, p: &Path| -> Result<_, CliError> {
        let text = read_file(p)?;
        if a.strict {
            return read_annotated(&text, a.tokenize).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())));
        }
        let (pairs, bad) = read_annotated_lenient(&text, a.tokenize);
        for r in &bad {
            let rec = serde_json::json!({ "split": split, "file": p.display().to_string(), "line": r.line, "text": r.text, "reason": r.reason });
            rejected.push_str(&(rec.to_string() + "\n"));
        }
        if !bad.is_empty() {
            eprintln!("{}: rejected {} malformed line(s), see rejected.jsonl", p.display(), bad.len());
        }
        rejected_counts.insert(split.into(), bad.len().into());
        Ok(pairs)
    };
    let raw = Splits {
        train: read("train", &a.train)?,
        dev: read("dev", &a.dev)?,
        test: match &a.test {
            Some(p) => read("test", p)?,
            None => vec![],
        },
    };
    let (data, counts) = prepare(raw, &config.data, config.vocab_cap)?;
    let files = data.write(&a.out)?;
    let mut rec = Recorder { command: "prepare", args, outputs: files.iter().map(|p| p.display().to_string()).collect() };
    rec.write(&a.out.join("rejected.jsonl"), &rejected)?;
    rec.outputs.sort();
    let summary = serde_json::json!({
        "regime": crate::config::regime_text(&config.data.regime),
        "train": data.splits.train.len(),
        "dev": data.splits.dev.len(),
        "test": data.splits.test.len(),
        "regime_counts": counts,
        "filtered": data.filtered.len(),
        "rejected": rejected_counts,
        "vocab": data.vocab.len(),
        "chars": data.chars.len(),
    });
    rec.finish(&a.out.join("prepare.manifest.json"), Some(config.hash()), summary)
}

fn train_cmd(a: TrainArgs, args: &[String]) -> Result<(), CliError> {
    let mut base = Vec::new();
    if let Some(m) = a.model {
        base.push(format!("model = {}", format!("{m:?}").to_lowercase()));
    }
    if let Some(p) = a.preset {
        base.push(format!("preset = {}", format!("{p:?}").to_lowercase()));
    }
    let config = load_config(&a.config, &base)?;
    let data = Dataset::load(&a.data)?;
    let run = RunDir::new(&a.out);
    run.init(&config, &data)?;
    let model = Model::build(&config, &data.vocab, &data.chars)?;
    let pretrained = a.pretrained.as_deref().map(read_file).transpose()?;
    let opts = TrainRunOptions {
        out_dir: Some(a.out.clone()),
        resume: a.resume,
        verbose: !a.quiet,
        pretrained,
        cnn_corrections: !a.no_corrections,
        valid_limit: a.valid_limit,
    };
    let outcome = train_model(&model, &config, &data, &opts)?;
    let last = outcome.manifest.epochs.last();
    let summary = serde_json::json!({
        "model": config.model.name(),
        "epochs_run": outcome.manifest.epochs.len(),
        "best_epoch": outcome.epoch,
        "final_val_ppl": last.map(|e| e.val_ppl),
        "updates": last.map(|e| e.updates),
        "optimizer": config.train.optimizer.name(),
    });
    let rec = Recorder {
        command: "train",
        args,
        outputs: [run.config(), a.out.join("manifest.jsonl"), run.best()].iter().map(|p| p.display().to_string()).collect(),
    };
    rec.finish(&a.out.join("train.manifest.json"), Some(config.hash()), summary)
}

/// The bias or threshold stored in a `tune` result.
enum Tuned {
    Bias(TagBias),
    Threshold(f64),
}

fn read_tuned(path: &Path) -> Result<Tuned, CliError> {
    let v: serde_json::Value =
        serde_json::from_str(&read_file(path)?).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if let Some(b) = v.get("best") {
        let b: TagBias = serde_json::from_value(b.clone()).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        return Ok(Tuned::Bias(b));
    }
    v.get("threshold")
        .and_then(|t| t.as_f64())
        .map(Tuned::Threshold)
        .ok_or_else(|| CliError::Usage(format!("{}: no `best` bias or `threshold`", path.display())))
}

fn decode(a: DecodeArgs, args: &[String]) -> Result<(), CliError> {
    let mut run = load_run(&a.model)?;
    let mut threshold = a.threshold.unwrap_or(run.config.cnn.threshold);
    if let Some(b) = &a.bias {
        run.config.decode.bias = parse_bias(b)?;
    }
    if let Some(p) = &a.bias_from {
        match read_tuned(p)? {
            Tuned::Bias(b) => run.config.decode.bias = b,
            Tuned::Threshold(t) => threshold = t,
        }
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(CliError::Usage(format!("threshold {threshold} outside (0, 1)")));
    }
    let sents = sentences(&a.sentences)?;
    let p = run.predictor();
    let mut rec = Recorder { command: "decode", args, outputs: vec![] };
    let (set, detail) = match &run.model {
        Model::EncDec(_) => {
            let records = p.decode(&sents, &run.config.decode)?;
            let lines: String = records.iter().map(|r| serde_json::to_string(r).expect("serializable") + "\n").collect();
            let drift = records.iter().filter(|r| r.drift).count();
            let set = PredictionSet::from_pairs("decode", records.iter().map(|r| (r.id.clone(), r.label)))?;
            (set, (lines, serde_json::json!({ "bias": run.config.decode.bias, "beam": run.config.decode.beam, "drift": drift })))
        }
        Model::Cnn(_) => {
            let probs = p.probabilities(&sents)?;
            let lines: String = sents
                .iter()
                .zip(&probs)
                .map(|((id, _), pr)| serde_json::json!({ "id": id, "probability": pr }).to_string() + "\n")
                .collect();
            let set = PredictionSet::from_pairs(
                "decode",
                sents.iter().zip(&probs).map(|((id, _), &pr)| (id.clone(), crate::cnnclassifier::cnn_predict(pr, threshold))),
            )?;
            (set, (lines, serde_json::json!({ "threshold": threshold })))
        }
    };
    let set = PredictionSet { system: run.config.model.name().into(), config_hash: run.config.hash(), ..set };
    rec.write(&with_suffix(&a.out, ".tsv"), &set.to_tsv())?;
    rec.write(&with_suffix(&a.out, ".jsonl"), &detail.0)?;
    let positives = set.labels.values().filter(|&&l| l).count();
    let mut summary = serde_json::json!({ "sentences": set.len(), "positives": positives });
    summary["settings"] = detail.1;
    rec.finish(&with_suffix(&a.out, ".manifest.json"), Some(run.config.hash()), summary)
}

fn threshold_table(rows: &[ThresholdRow]) -> String {
    let mut s = String::from("threshold\tprecision\trecall\tf1\tpositives\n");
    for r in rows {
        s.push_str(&format!(
            "{}\t{:.4}\t{:.4}\t{:.4}\t{}\n",
            r.threshold, r.metrics.precision, r.metrics.recall, r.metrics.f1, r.positives
        ));
    }
    s
}

/// Uniform-grid rows only, in grid order.
fn uniform_rows(rows: &[SweepRow]) -> Vec<SweepRow> {
    rows.iter().filter(|r| r.bias.0.iter().all(|&x| x == r.bias.0[0])).copied().collect()
}

enum TuneOutput {
    Bias(TuneResult),
    Threshold(f64, Vec<ThresholdRow>),
}

fn run_tuning(run: &LoadedRun, data: &Dataset, split: &str, grid: Option<&str>, refine: &[f64]) -> Result<TuneOutput, CliError> {
    let sents = data.sources(split);
    if sents.is_empty() {
        return Err(CliError::Usage(format!("split `{split}` is empty or unknown")));
    }
    let gold = data.labels(split);
    let p = run.predictor();
    match &run.model {
        Model::EncDec(_) => {
            let grid = GridSpec { uniform: parse_grid(grid.unwrap_or("-2:4:0.5"))?, refine: refine.to_vec() };
            Ok(TuneOutput::Bias(p.tune(&sents, &gold, &grid, &run.config.decode)?))
        }
        Model::Cnn(_) => {
            let probs = p.probabilities(&sents)?;
            let (t, rows) = tune_threshold(&probs, &gold, &parse_grid(grid.unwrap_or("0.05:0.95:0.05"))?)?;
            Ok(TuneOutput::Threshold(t, rows))
        }
    }
}

fn tune(a: TuneArgs, args: &[String]) -> Result<(), CliError> {
    let run = load_run(&a.model)?;
    let data = Dataset::load(&a.data)?;
    let out = run_tuning(&run, &data, &a.split, a.grid.as_deref(), &parse_list(&a.refine)?)?;
    let mut rec = Recorder { command: "tune", args, outputs: vec![] };
    let summary = match &out {
        TuneOutput::Bias(r) => {
            rec.write(&with_suffix(&a.out, ".json"), &(serde_json::to_string_pretty(r).expect("serializable") + "\n"))?;
            rec.write(&with_suffix(&a.out, ".sweep.tsv"), &sweep_table(&r.sweep))?;
            let untuned = r.sweep.iter().find(|s| s.bias.is_zero()).map(|s| s.metrics);
            println!("best bias {:?}: {}", r.best.0, r.best_metrics);
            serde_json::json!({ "best": r.best, "best_metrics": r.best_metrics, "zero_bias_metrics": untuned, "points": r.sweep.len() })
        }
        TuneOutput::Threshold(t, rows) => {
            let best = rows.iter().find(|r| r.threshold == *t).map(|r| r.metrics);
            let json = serde_json::json!({ "threshold": t, "best_metrics": best, "rows": rows });
            rec.write(&with_suffix(&a.out, ".json"), &(serde_json::to_string_pretty(&json).expect("serializable") + "\n"))?;
            rec.write(&with_suffix(&a.out, ".sweep.tsv"), &threshold_table(rows))?;
            println!("best threshold {t}: {}", best.unwrap_or_default());
            serde_json::json!({ "threshold": t, "best_metrics": best, "points": rows.len() })
        }
    };
    rec.finish(&with_suffix(&a.out, ".manifest.json"), Some(run.config.hash()), summary)
}

fn score_cmd(a: ScoreArgs, args: &[String]) -> Result<(), CliError> {
    let pred = PredictionSet::from_tsv("pred", &read_file(&a.pred)?)?;
    let gold = PredictionSet::from_tsv("gold", &read_file(&a.gold)?)?;
    let m = score(&pred, &gold)?;
    let report = m.report();
    print!("{report}");
    let prefix = a.out.unwrap_or_else(|| with_suffix(&a.pred, ".score"));
    let mut rec = Recorder { command: "score", args, outputs: vec![] };
    rec.write(&with_suffix(&prefix, ".txt"), &report)?;
    rec.finish(&with_suffix(&prefix, ".manifest.json"), None, serde_json::to_value(m).expect("serializable"))
}

fn ensemble(a: EnsembleArgs, args: &[String]) -> Result<(), CliError> {
    let systems = a
        .preds
        .iter()
        .map(|p| Ok(PredictionSet::from_tsv(&p.display().to_string(), &read_file(p)?)?))
        .collect::<Result<Vec<_>, CliError>>()?;
    let vote = ensemble_vote_with(&systems, matches!(a.tie, TieArg::Positive))?;
    let mut rec = Recorder { command: "ensemble", args, outputs: vec![] };
    rec.write(&with_suffix(&a.out, ".tsv"), &vote.to_tsv())?;
    let mut summary = serde_json::json!({
        "systems": systems.len(),
        "tie": format!("{:?}", a.tie).to_lowercase(),
        "positives": vote.labels.values().filter(|&&l| l).count(),
    });
    if let Some(g) = &a.gold {
        let m: Metrics = score(&vote, &PredictionSet::from_tsv("gold", &read_file(g)?)?)?;
        print!("{}", m.report());
        summary["metrics"] = serde_json::to_value(m).expect("serializable");
    }
    rec.finish(&with_suffix(&a.out, ".manifest.json"), None, summary)
}

fn sweep(a: SweepArgs, args: &[String]) -> Result<(), CliError> {
    let (table, hash) = if let Some(from) = &a.from {
        let v: serde_json::Value =
            serde_json::from_str(&read_file(from)?).map_err(|e| CliError::Usage(format!("{}: {e}", from.display())))?;
        if let Ok(r) = serde_json::from_value::<TuneResult>(v.clone()) {
            (sweep_table(&uniform_rows(&r.sweep)), None)
        } else {
            let rows: Vec<ThresholdRow> = v
                .get("rows")
                .and_then(|r| serde_json::from_value(r.clone()).ok())
                .ok_or_else(|| CliError::Usage(format!("{}: not a tune result", from.display())))?;
            (threshold_table(&rows), None)
        }
    } else {
        let (Some(run_dir), Some(data_dir)) = (&a.run, &a.data) else {
            return Err(CliError::Usage("give --from FILE or --run DIR --data DIR".into()));
        };
        let run = RunDir::new(run_dir).load(a.checkpoint.as_deref())?;
        let data = Dataset::load(data_dir)?;
        let table = match run_tuning(&run, &data, &a.split, a.grid.as_deref(), &[])? {
            TuneOutput::Bias(r) => sweep_table(&uniform_rows(&r.sweep)),
            TuneOutput::Threshold(_, rows) => threshold_table(&rows),
        };
        (table, Some(run.config.hash()))
    };
    let mut rec = Recorder { command: "sweep-plot-data", args, outputs: vec![] };
    rec.write(&a.out, &table)?;
    let rows = table.lines().count().saturating_sub(1);
    rec.finish(&with_suffix(&a.out, ".manifest.json"), hash, serde_json::json!({ "rows": rows }))
}

fn grad_check(a: GradCheckArgs, args: &[String]) -> Result<(), CliError> {
    let targets: Vec<CheckTarget> = match a.target {
        CheckArg::Ops => vec![CheckTarget::Ops],
        CheckArg::Word => vec![CheckTarget::Word],
        CheckArg::Char => vec![CheckTarget::Char],
        CheckArg::Cnn => vec![CheckTarget::Cnn],
        CheckArg::All => CheckTarget::ALL.to_vec(),
    };
    set_corrupt_tanh_gradient(a.corrupt_tanh);
    let base = GradCheckOptions { tolerance: a.tolerance, seed: a.seed, ..Default::default() };
    let mut outcomes = Vec::new();
    for t in targets {
        let opts = match t {
            CheckTarget::Ops => base.clone(),
            _ => GradCheckOptions { max_coords_per_param: Some(a.coords), ..base.clone() },
        };
        outcomes.extend(run_checks(&[t], a.seed, &opts)?);
    }
    set_corrupt_tanh_gradient(false);
    let text: String = outcomes.iter().map(|o| o.line() + "\n").collect();
    print!("{text}");
    let failed = outcomes.iter().filter(|o| !o.report.passed()).count();
    let worst = outcomes.iter().map(|o| o.report.max_rel_error).fold(0.0, f64::max);
    let mut rec = Recorder { command: "grad-check", args, outputs: vec![] };
    rec.write(&with_suffix(&a.out, ".txt"), &text)?;
    let summary = serde_json::json!({ "checks": outcomes.len(), "failed": failed, "max_rel_error": worst, "tolerance": a.tolerance });
    rec.finish(&with_suffix(&a.out, ".manifest.json"), None, summary)?;
    if failed > 0 {
        return Err(CliError::GradCheckFailed { failed, total: outcomes.len() });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bias_and_grid_parsing() {
        assert_eq!(parse_bias("1.5").unwrap(), TagBias::uniform(1.5));
        assert_eq!(parse_bias("1,-2,0,0.5").unwrap(), TagBias([1.0, -2.0, 0.0, 0.5]));
        assert!(parse_bias("1,2").is_err());
        assert!(parse_bias("x").is_err());
        assert_eq!(parse_grid("-1:1:0.5").unwrap(), vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert!(parse_grid("1:0:1").is_err());
        assert!(parse_grid("0:1").is_err());
        assert_eq!(parse_list("-1, 0.5").unwrap(), vec![-1.0, 0.5]);
        assert!(parse_list("").unwrap().is_empty());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn uniform_rows_drop_refinements() {
        let row = |b: [f64; 4]| SweepRow { bias: TagBias(b), metrics: Metrics::default(), positives: 0 };
        let rows = [row([0.0; 4]), row([1.0; 4]), row([1.5, 1.0, 1.0, 1.0])];
        assert_eq!(uniform_rows(&rows).len(), 2);
    }
}
