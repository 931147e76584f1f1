//! Command-line workflows: train, eval, gradcheck, infer, rc-features, synth.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::classifier::{
    cv_mean, evaluate_samples, fit, mix_seed, EpochRecord, SentimentModel, TrainConfig,
};
use crate::data::synthetic::{generate_polarity, write_line_corpus, SyntheticSpec};
use crate::data::{
    encode_corpus, load_dataset, load_pretrained_embeddings, make_folds, tokenize, Dataset,
    DatasetFormat, EncodedSample, Vocab,
};
use crate::error::{Error, Result};
use crate::rc_features::features_tsv;
use crate::recurrent::Variant;
use crate::verify::{run_suite, DEFAULT_H, DEFAULT_TOL, RESOLVABLE};

/// Seed streams, so initialization, embedding fill and validation carving
/// never share random numbers.
const STREAM_INIT: u64 = 0x1217;
const STREAM_EMBED: u64 = 0xE3BE;
const STREAM_VALID: u64 = 0x7A11;

/// The sentences of the negation walk-through used by `infer --demo`.
pub const DEMO_SENTENCES: [&str; 3] = [
    "I like that Smith",
    "I like that Smith, he's not making fun of these people,",
    "I like that Smith, he's not making fun of these people, he's not laughing at them.",
];

pub const METRICS_HEADER: &str = "epoch,fold,split,loss,accuracy";

#[derive(Debug, Parser)]
#[command(
    name = "cru",
    version,
    about = "Contextual recurrent units for sentence classification",
    args_override_self = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train with cross-validation or the fixed split, writing metrics and a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split of its dataset.
    Eval(EvalArgs),
    /// Finite-difference check of every cell variant and the classifier.
    Gradcheck(GradcheckArgs),
    /// Classify sentences with a checkpoint.
    Infer(InferArgs),
    /// Per-token frequency and query-count features of a document.
    RcFeatures(RcFeaturesArgs),
    /// Write a seeded surrogate corpus in the MR or SUBJ layout.
    Synth(SynthArgs),
}

/// Hyper-parameter overrides; unset flags fall back to the config file, then
/// to the dataset defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct HyperFlags {
    /// gru | shallow | deep | deep_enhanced
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Convolution filter length (odd).
    #[arg(long)]
    pub filter: Option<usize>,
    #[arg(long)]
    pub embed: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Width of the fully connected layer.
    #[arg(long)]
    pub fc: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// L2 strength on the embedding table.
    #[arg(long)]
    pub l2: Option<f64>,
    /// Global gradient-norm cap.
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "vocab-cap")]
    pub vocab_cap: Option<usize>,
    /// Text embedding file (`token v1 ... vd` per line).
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// Number of cross-validation folds.
    #[arg(long)]
    pub folds: Option<usize>,
    /// Run only the first N folds of the plan.
    #[arg(long = "run-folds")]
    pub run_folds: Option<usize>,
    /// Fraction of each training split held out for best-epoch selection.
    #[arg(long = "valid-frac")]
    pub valid_frac: Option<f64>,
    /// Truncate samples to this many tokens.
    #[arg(long = "max-len")]
    pub max_len: Option<usize>,
}

impl HyperFlags {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        macro_rules! push {
            ($key:literal, $field:expr) => {
                if let Some(v) = &$field {
                    out.push(($key, v.to_string()));
                }
            };
        }
        push!("variant", self.variant);
        push!("filter", self.filter);
        push!("embed", self.embed);
        push!("hidden", self.hidden);
        push!("fc", self.fc);
        push!("dropout", self.dropout);
        push!("lr", self.lr);
        push!("l2", self.l2);
        push!("clip", self.clip);
        push!("batch", self.batch);
        push!("epochs", self.epochs);
        push!("seed", self.seed);
        push!("vocab-cap", self.vocab_cap);
        if let Some(p) = &self.pretrained {
            out.push(("pretrained", p.display().to_string()));
        }
        push!("folds", self.folds);
        push!("run-folds", self.run_folds);
        push!("valid-frac", self.valid_frac);
        push!("max-len", self.max_len);
        out
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Dataset name: mr | subj | imdb.
    #[arg(long)]
    pub dataset: Option<String>,
    /// On-disk layout, when it differs from the dataset name.
    #[arg(long)]
    pub format: Option<DatasetFormat>,
    /// Dataset directory (default: data/<dataset>).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Flat key=value file; keys are the long flag names.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint path (default: <out>/model.ckpt).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory for metrics, logs and the summary.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub hyper: HyperFlags,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory (default: the one recorded at training time).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// train | valid | test | all
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Directory for eval.csv (default: the checkpoint's directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub hyper: HyperFlags,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// First seed.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Number of consecutive seeds.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = DEFAULT_H)]
    pub h: f64,
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Use an all-zero model over an empty vocabulary instead of a checkpoint.
    #[arg(long)]
    pub zero_model: bool,
    /// Classify the three negation walk-through sentences.
    #[arg(long)]
    pub demo: bool,
    /// Sentences to classify.
    pub text: Vec<String>,
    #[command(flatten)]
    pub hyper: HyperFlags,
}

#[derive(Debug, Clone, Args)]
pub struct RcFeaturesArgs {
    #[arg(long)]
    pub document: PathBuf,
    #[arg(long)]
    pub query: PathBuf,
    /// Write the TSV here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// mr | subj
    #[arg(long)]
    pub format: DatasetFormat,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "per-class", default_value_t = 500)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "negation-rate", default_value_t = 0.3)]
    pub negation_rate: f64,
}

/// Fully resolved training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: String,
    pub format: DatasetFormat,
    pub data: PathBuf,
    pub train: TrainConfig,
    pub run_folds: Option<usize>,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse `{value}`: {e}")))
}

/// Applies one hyper-parameter; unknown keys are rejected by name.
fn apply_hyper(
    cfg: &mut TrainConfig,
    run_folds: &mut Option<usize>,
    key: &str,
    value: &str,
) -> Result<()> {
    match key {
        "variant" => cfg.variant = parse_value(key, value)?,
        "filter" => cfg.window = parse_value(key, value)?,
        "embed" => cfg.embed = parse_value(key, value)?,
        "hidden" => cfg.hidden = parse_value(key, value)?,
        "fc" => cfg.fc = parse_value(key, value)?,
        "dropout" => cfg.dropout = parse_value(key, value)?,
        "lr" => cfg.lr = parse_value(key, value)?,
        "l2" => cfg.l2 = parse_value(key, value)?,
        "clip" => cfg.clip = parse_value(key, value)?,
        "batch" => cfg.batch = parse_value(key, value)?,
        "epochs" => cfg.epochs = parse_value(key, value)?,
        "seed" => cfg.seed = parse_value(key, value)?,
        "vocab-cap" => cfg.vocab_cap = Some(parse_value(key, value)?),
        "pretrained" => cfg.pretrained = Some(PathBuf::from(value)),
        "folds" => cfg.folds = parse_value(key, value)?,
        "run-folds" => *run_folds = Some(parse_value(key, value)?),
        "valid-frac" => cfg.valid_frac = parse_value(key, value)?,
        "max-len" => cfg.max_len = Some(parse_value(key, value)?),
        other => {
            return Err(Error::Config(format!(
                "unknown configuration key `{other}`"
            )))
        }
    }
    Ok(())
}

const LOCATION_KEYS: [&str; 5] = ["dataset", "format", "data", "checkpoint", "out"];

/// Resolves flag > config file > dataset default.
pub fn resolve_train(args: &TrainArgs) -> Result<RunConfig> {
    let file = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            checkpoint::parse_key_values(&text, p)?
        }
        None => BTreeMap::new(),
    };
    let dataset = args
        .dataset
        .clone()
        .or_else(|| file.get("dataset").cloned())
        .ok_or_else(|| Error::Config("dataset: no dataset given".into()))?;
    let format = match (&args.format, file.get("format")) {
        (Some(f), _) => *f,
        (None, Some(f)) => parse_value("format", f)?,
        (None, None) => dataset.parse().map_err(|_| {
            Error::Config(format!(
                "format: dataset `{dataset}` is not mr|subj|imdb; pass --format"
            ))
        })?,
    };
    let data = args
        .data
        .clone()
        .or_else(|| file.get("data").map(PathBuf::from))
        .unwrap_or_else(|| Path::new("data").join(&dataset));
    let out = args
        .out
        .clone()
        .or_else(|| file.get("out").map(PathBuf::from))
        .unwrap_or_else(|| Path::new("runs").join(&dataset));
    let checkpoint = args
        .checkpoint
        .clone()
        .or_else(|| file.get("checkpoint").map(PathBuf::from))
        .unwrap_or_else(|| out.join("model.ckpt"));

    let mut train = TrainConfig::for_dataset(format);
    let mut run_folds = None;
    for (k, v) in &file {
        if !LOCATION_KEYS.contains(&k.as_str()) {
            apply_hyper(&mut train, &mut run_folds, k, v)?;
        }
    }
    for (k, v) in args.hyper.pairs() {
        apply_hyper(&mut train, &mut run_folds, k, &v)?;
    }
    train.validate()?;
    if run_folds == Some(0) {
        return Err(Error::Config("run-folds: must be at least 1".into()));
    }
    Ok(RunConfig {
        dataset,
        format,
        data,
        train,
        run_folds,
        checkpoint,
        out,
    })
}

/// Index sets of one run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Fold `fold` of a line-file corpus of `n` samples (with `folds == 1`
/// everything is training data), then the validation carve-out.
pub fn cv_partition(n: usize, cfg: &TrainConfig, fold: usize) -> Result<Partition> {
    let (train, test) = if cfg.folds == 1 {
        ((0..n).collect(), Vec::new())
    } else {
        make_folds(n, cfg.folds, cfg.seed)?.split(fold)?
    };
    Ok(carve_valid(train, test, cfg, fold))
}

fn carve_valid(
    mut train: Vec<usize>,
    test: Vec<usize>,
    cfg: &TrainConfig,
    fold: usize,
) -> Partition {
    let take = (train.len() as f64 * cfg.valid_frac).ceil() as usize;
    if take == 0 || take >= train.len() {
        return Partition {
            train,
            valid: Vec::new(),
            test,
        };
    }
    let mut order = train.clone();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[
        cfg.seed,
        fold as u64,
        STREAM_VALID,
    ])));
    let mut valid: Vec<usize> = order[..take].to_vec();
    valid.sort_unstable();
    train.retain(|i| valid.binary_search(i).is_err());
    Partition { train, valid, test }
}

fn pick(samples: &[EncodedSample], idx: &[usize]) -> Vec<EncodedSample> {
    idx.iter().map(|&i| samples[i].clone()).collect()
}

/// Encoded samples of every split of a run, in the same layout `train` and
/// `eval` both use.
struct Splits {
    train: Vec<EncodedSample>,
    valid: Vec<EncodedSample>,
    test: Vec<EncodedSample>,
}

fn splits_for(ds: &Dataset, vocab: &Vocab, cfg: &TrainConfig, fold: usize) -> Result<Splits> {
    let train_all = encode_corpus(&ds.train, vocab, cfg.max_len);
    match &ds.test {
        Some(test) => {
            let p = carve_valid((0..train_all.len()).collect(), Vec::new(), cfg, fold);
            Ok(Splits {
                train: pick(&train_all, &p.train),
                valid: pick(&train_all, &p.valid),
                test: encode_corpus(test, vocab, cfg.max_len),
            })
        }
        None => {
            let p = cv_partition(train_all.len(), cfg, fold)?;
            Ok(Splits {
                train: pick(&train_all, &p.train),
                valid: pick(&train_all, &p.valid),
                test: pick(&train_all, &p.test),
            })
        }
    }
}

fn build_vocab(ds: &Dataset, cfg: &TrainConfig) -> Result<Vocab> {
    // Line-file corpora have no fixed test split: the vocabulary covers the
    // whole corpus and unseen-in-training words keep their initial vectors.
    Vocab::build(ds.train.token_seqs(), cfg.vocab_cap)
}

fn csv_row(out: &mut String, fold: usize, r: &EpochRecord) {
    writeln!(
        out,
        "{},{},{},{:.6},{:.6}",
        r.epoch, fold, r.split, r.loss, r.accuracy
    )
    .expect("write to string");
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Summary of a finished training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub fold_accuracies: Vec<f64>,
    pub mean_accuracy: Option<f64>,
    pub train_final_accuracy: f64,
}

pub fn cmd_train(rc: &RunConfig) -> Result<TrainSummary> {
    let cfg = &rc.train;
    fs::create_dir_all(&rc.out).map_err(|e| Error::io(&rc.out, e))?;
    let ds = load_dataset(rc.format, &rc.data)?;
    let vocab = build_vocab(&ds, cfg)?;
    info!(
        "event=dataset name={} format={} train={} test={} vocab={}",
        rc.dataset,
        rc.format,
        ds.train.len(),
        ds.test.as_ref().map_or(0, |t| t.len()),
        vocab.len()
    );
    let pretrained = match &cfg.pretrained {
        Some(path) => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, STREAM_EMBED]));
            let load = load_pretrained_embeddings(path, &vocab, cfg.embed, &mut rng)?;
            info!(
                "event=pretrained path={} found={} coverage={:.4}",
                path.display(),
                load.found,
                load.coverage
            );
            Some(load.table)
        }
        None => None,
    };

    let folds = if ds.test.is_some() { 1 } else { cfg.folds };
    let run = rc.run_folds.unwrap_or(folds).min(folds);
    let mut csv = format!("{METRICS_HEADER}\n");
    let mut fold_acc = Vec::new();
    let mut last = None;
    for fold in 0..run {
        let s = splits_for(&ds, &vocab, cfg, fold)?;
        let spec = cfg.model_spec(vocab.len());
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, fold as u64, STREAM_INIT]));
        let model = SentimentModel::random(spec, pretrained.clone(), &mut rng)?;
        info!(
            "event=fold_start fold={fold} train={} valid={} test={}",
            s.train.len(),
            s.valid.len(),
            s.test.len()
        );
        let result = fit(model, &s.train, &s.valid, &s.test, cfg, fold as u64)?;
        for r in &result.history {
            csv_row(&mut csv, fold, r);
        }
        let train_final = evaluate_samples(&result.model, &s.train)?;
        csv_row(
            &mut csv,
            fold,
            &EpochRecord {
                epoch: result.chosen_epoch,
                split: "train_final",
                loss: train_final.loss,
                accuracy: train_final.accuracy,
            },
        );
        let test_acc = if s.test.is_empty() {
            None
        } else {
            let t = evaluate_samples(&result.model, &s.test)?;
            csv_row(
                &mut csv,
                fold,
                &EpochRecord {
                    epoch: result.chosen_epoch,
                    split: "test_final",
                    loss: t.loss,
                    accuracy: t.accuracy,
                },
            );
            fold_acc.push(t.accuracy);
            Some(t.accuracy)
        };
        info!(
            "event=fold_end fold={fold} chosen_epoch={} train_final_accuracy={:.6} test_accuracy={}",
            result.chosen_epoch,
            train_final.accuracy,
            test_acc.map_or("none".to_string(), |a| format!("{a:.6}"))
        );
        last = Some((fold, result, train_final.accuracy, test_acc));
    }
    write_file(&rc.out.join("metrics.csv"), &csv)?;

    let (fold, result, train_final_accuracy, test_acc) = last.expect("at least one fold runs");
    let mean = if fold_acc.is_empty() {
        None
    } else {
        Some(cv_mean(&fold_acc)?)
    };
    let mut meta = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        meta.insert(k.to_string(), v);
    };
    put("dataset", rc.dataset.clone());
    put("format", rc.format.to_string());
    put("data", rc.data.display().to_string());
    put("variant", cfg.variant.to_string());
    put("vocab", vocab.len().to_string());
    put("embed", cfg.embed.to_string());
    put("hidden", cfg.hidden.to_string());
    put("filter", cfg.window.to_string());
    put("fc", cfg.fc.to_string());
    put("dropout", cfg.dropout.to_string());
    put("lr", cfg.lr.to_string());
    put("l2", cfg.l2.to_string());
    put("clip", cfg.clip.to_string());
    put("batch", cfg.batch.to_string());
    put("epochs", cfg.epochs.to_string());
    put("seed", cfg.seed.to_string());
    put("folds", cfg.folds.to_string());
    put("fold", fold.to_string());
    put("valid-frac", cfg.valid_frac.to_string());
    if let Some(m) = cfg.max_len {
        put("max-len", m.to_string());
    }
    if let Some(c) = cfg.vocab_cap {
        put("vocab-cap", c.to_string());
    }
    put("chosen_epoch", result.chosen_epoch.to_string());
    put("train_final_accuracy", format!("{train_final_accuracy:.6}"));
    if let Some(a) = test_acc {
        put("test_accuracy", format!("{a:.6}"));
    }
    checkpoint::save(
        &rc.checkpoint,
        &result.model,
        Some(&result.adam),
        &meta,
        &vocab,
    )?;

    let mut summary = format!(
        "dataset={}\nvariant={}\nfolds_run={}\n",
        rc.dataset, cfg.variant, run
    );
    for (i, a) in fold_acc.iter().enumerate() {
        writeln!(summary, "fold{i}_accuracy={a:.6}").expect("write to string");
    }
    if let Some(m) = mean {
        writeln!(summary, "mean_accuracy={m:.6}").expect("write to string");
    }
    writeln!(summary, "checkpoint={}", rc.checkpoint.display()).expect("write to string");
    write_file(&rc.out.join("summary.txt"), &summary)?;
    info!(
        "event=summary dataset={} variant={} folds_run={run} mean_accuracy={}",
        rc.dataset,
        cfg.variant,
        mean.map_or("none".to_string(), |m| format!("{m:.6}"))
    );
    Ok(TrainSummary {
        fold_accuracies: fold_acc,
        mean_accuracy: mean,
        train_final_accuracy,
    })
}

fn meta_get<'m>(meta: &'m BTreeMap<String, String>, key: &str) -> Result<&'m str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Config(format!("{key}: missing from checkpoint metadata")))
}

/// Rebuilds the training configuration recorded in a checkpoint, then applies overrides.
fn config_from_meta(
    meta: &BTreeMap<String, String>,
    overrides: &HyperFlags,
) -> Result<(DatasetFormat, TrainConfig)> {
    let format: DatasetFormat = parse_value("format", meta_get(meta, "format")?)?;
    let mut cfg = TrainConfig::for_dataset(format);
    let mut ignored = None;
    for (k, v) in meta {
        let recorded = [
            "variant",
            "filter",
            "embed",
            "hidden",
            "fc",
            "dropout",
            "lr",
            "l2",
            "clip",
            "batch",
            "epochs",
            "seed",
            "vocab-cap",
            "folds",
            "valid-frac",
            "max-len",
        ];
        if recorded.contains(&k.as_str()) {
            apply_hyper(&mut cfg, &mut ignored, k, v)?;
        }
    }
    for (k, v) in overrides.pairs() {
        apply_hyper(&mut cfg, &mut ignored, k, &v)?;
    }
    cfg.validate()?;
    Ok((format, cfg))
}

/// A checkpoint bound to a model.
pub struct Loaded {
    pub model: SentimentModel,
    pub vocab: Vocab,
    pub meta: BTreeMap<String, String>,
    pub format: DatasetFormat,
    pub config: TrainConfig,
}

pub fn load_checkpoint(path: &Path, overrides: &HyperFlags) -> Result<Loaded> {
    let stored = checkpoint::load(path)?;
    let (format, config) = config_from_meta(&stored.meta, overrides)?;
    let spec = config.model_spec(stored.vocab.len());
    let mut model = SentimentModel::zeros(spec)?;
    stored.restore(&mut model)?;
    Ok(Loaded {
        model,
        vocab: stored.vocab,
        meta: stored.meta,
        format,
        config,
    })
}

/// Accuracy report of `eval`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub total: usize,
    pub line: String,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let loaded = load_checkpoint(&args.checkpoint, &args.hyper)?;
    let data = match &args.data {
        Some(d) => d.clone(),
        None => PathBuf::from(meta_get(&loaded.meta, "data")?),
    };
    let fold: usize = parse_value("fold", meta_get(&loaded.meta, "fold")?)?;
    let ds = load_dataset(loaded.format, &data)?;
    let s = splits_for(&ds, &loaded.vocab, &loaded.config, fold)?;
    let samples = match args.split.as_str() {
        "train" => s.train,
        "valid" => s.valid,
        "test" => s.test,
        "all" => {
            let mut all = s.train;
            all.extend(s.valid);
            all.extend(s.test);
            all
        }
        other => {
            return Err(Error::Config(format!(
                "split: expected train|valid|test|all, got `{other}`"
            )))
        }
    };
    if samples.is_empty() {
        return Err(Error::Config(format!(
            "split: `{}` is empty for this checkpoint",
            args.split
        )));
    }
    let m = evaluate_samples(&loaded.model, &samples)?;
    let epoch = loaded
        .meta
        .get("chosen_epoch")
        .cloned()
        .unwrap_or_else(|| "0".into());
    let line = format!(
        "split={} fold={fold} total={} loss={:.6} accuracy={:.6}",
        args.split, m.total, m.loss, m.accuracy
    );
    let out = match &args.out {
        Some(o) => o.clone(),
        None => args
            .checkpoint
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default(),
    };
    let csv = format!(
        "{METRICS_HEADER}\n{epoch},{fold},{},{:.6},{:.6}\n",
        args.split, m.loss, m.accuracy
    );
    write_file(&out.join("eval.csv"), &csv)?;
    Ok(EvalReport {
        split: args.split.clone(),
        loss: m.loss,
        accuracy: m.accuracy,
        total: m.total,
        line,
    })
}

/// Output of the finite-difference suite.
#[derive(Clone, Debug)]
pub struct GradcheckOutcome {
    /// One line per check plus a summary line.
    pub report: String,
    /// `component/variant/seed:parameter(error)` for every failing parameter.
    pub failures: Vec<String>,
    pub max_rel_error: f64,
    /// Largest error over entries central differences can resolve.
    pub resolvable_max_rel_error: f64,
}

impl GradcheckOutcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    /// `Err(Verification)` naming every failing parameter.
    pub fn into_result(self) -> Result<String> {
        if self.passed() {
            Ok(self.report)
        } else {
            Err(Error::Verification(format!(
                "failing parameters: {}",
                self.failures.join(" ")
            )))
        }
    }
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<GradcheckOutcome> {
    if args.seeds == 0 {
        return Err(Error::Config("seeds: must be at least 1".into()));
    }
    let seeds: Vec<u64> = (args.seed..args.seed + args.seeds).collect();
    let entries = run_suite(&seeds, args.h, args.tol)?;
    let mut report = String::new();
    let mut failures = Vec::new();
    let (mut worst, mut worst_resolvable) = (0.0f64, 0.0f64);
    for e in &entries {
        let resolvable = e.report.max_rel_error_above(RESOLVABLE);
        worst = worst.max(e.report.max_rel_error);
        worst_resolvable = worst_resolvable.max(resolvable);
        writeln!(
            report,
            "{e} resolvable_max_rel_error={resolvable:.3e} unresolvable_entries={}",
            e.report.entries_below(RESOLVABLE)
        )
        .expect("write to string");
        for p in e.report.failing() {
            failures.push(format!(
                "{}/{}/seed{}:{}({:.3e})",
                e.component, e.variant, e.seed, p.name, p.max_rel_error
            ));
        }
    }
    writeln!(
        report,
        "checks={} failed={} max_rel_error={worst:.3e} resolvable_max_rel_error={worst_resolvable:.3e} tol={:.1e}",
        entries.len(),
        entries.iter().filter(|e| !e.report.passed).count(),
        args.tol
    )
    .expect("write to string");
    Ok(GradcheckOutcome {
        report,
        failures,
        max_rel_error: worst,
        resolvable_max_rel_error: worst_resolvable,
    })
}

/// One classified sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub text: String,
    pub probability: f64,
    pub positive: bool,
}

impl std::fmt::Display for Prediction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "probability={:.6} label={} text={:?}",
            self.probability,
            if self.positive { "POS" } else { "NEG" },
            self.text
        )
    }
}

pub fn classify(model: &SentimentModel, vocab: &Vocab, text: &str) -> Result<Prediction> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(Error::Config(
            "text: nothing to classify after tokenization".into(),
        ));
    }
    let p = model.predict(&vocab.encode(&tokens))?;
    Ok(Prediction {
        text: text.to_string(),
        probability: p,
        positive: p >= crate::classifier::THRESHOLD,
    })
}

pub fn cmd_infer(args: &InferArgs) -> Result<Vec<Prediction>> {
    let (model, vocab) = match (&args.checkpoint, args.zero_model) {
        (Some(_), true) => {
            return Err(Error::Config(
                "checkpoint: conflicts with --zero-model".into(),
            ))
        }
        (Some(path), false) => {
            let l = load_checkpoint(path, &args.hyper)?;
            (l.model, l.vocab)
        }
        (None, true) => {
            let vocab = Vocab::from_tokens(vec![
                crate::data::vocab::PAD_TOKEN.into(),
                crate::data::vocab::UNK_TOKEN.into(),
                "<none>".into(),
            ])?;
            let mut cfg = TrainConfig::for_dataset(DatasetFormat::Mr);
            let mut ignored = None;
            for (k, v) in args.hyper.pairs() {
                apply_hyper(&mut cfg, &mut ignored, k, &v)?;
            }
            cfg.validate()?;
            (SentimentModel::zeros(cfg.model_spec(vocab.len()))?, vocab)
        }
        (None, false) => {
            return Err(Error::Config(
                "checkpoint: required unless --zero-model".into(),
            ))
        }
    };
    let mut texts: Vec<String> = args.text.clone();
    if args.demo {
        texts.extend(DEMO_SENTENCES.iter().map(|s| s.to_string()));
    }
    if texts.is_empty() {
        return Err(Error::Config(
            "text: no input sentences (pass text or --demo)".into(),
        ));
    }
    texts.iter().map(|t| classify(&model, &vocab, t)).collect()
}

pub fn cmd_rc_features(args: &RcFeaturesArgs) -> Result<String> {
    let read = |p: &Path| -> Result<Vec<String>> {
        let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
        let (text, dropped) = crate::data::tokenize::decode_lossy(&bytes);
        if dropped {
            warn!("event=undecodable_bytes_dropped path={}", p.display());
        }
        Ok(tokenize(&text))
    };
    let document = read(&args.document)?;
    let query = read(&args.query)?;
    if query.is_empty() {
        return Err(Error::Config("query: empty after tokenization".into()));
    }
    let tsv = features_tsv(&document, &query)?;
    if let Some(out) = &args.out {
        write_file(out, &tsv)?;
    }
    Ok(tsv)
}

pub fn cmd_synth(args: &SynthArgs) -> Result<usize> {
    if args.per_class == 0 {
        return Err(Error::Config("per-class: must be at least 1".into()));
    }
    let spec = SyntheticSpec {
        per_class: args.per_class,
        seed: args.seed,
        negation_rate: args.negation_rate,
        ..SyntheticSpec::default()
    };
    let samples = generate_polarity(&spec)?;
    write_line_corpus(args.format, &args.out, &samples)?;
    Ok(samples.len())
}

/// Caps the worker pool from `CRU_THREADS` when set.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("CRU_THREADS") else {
        return Ok(());
    };
    let n: usize = parse_value("CRU_THREADS", raw.trim())?;
    if n == 0 {
        return Err(Error::Config("CRU_THREADS: must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("CRU_THREADS: {e}")))
}

/// Runs a parsed command, printing its report; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Train(a) => {
            let rc = resolve_train(&a)?;
            let s = cmd_train(&rc)?;
            match s.mean_accuracy {
                Some(m) => println!("mean_accuracy={m:.6} folds={}", s.fold_accuracies.len()),
                None => println!("train_final_accuracy={:.6}", s.train_final_accuracy),
            }
            Ok(())
        }
        Command::Eval(a) => {
            println!("{}", cmd_eval(&a)?.line);
            Ok(())
        }
        Command::Gradcheck(a) => {
            let outcome = cmd_gradcheck(&a)?;
            print!("{}", outcome.report);
            outcome.into_result().map(|_| ())
        }
        Command::Infer(a) => {
            for p in cmd_infer(&a)? {
                println!("{p}");
            }
            Ok(())
        }
        Command::RcFeatures(a) => {
            let tsv = cmd_rc_features(&a)?;
            if a.out.is_none() {
                print!("{tsv}");
            }
            Ok(())
        }
        Command::Synth(a) => {
            let n = cmd_synth(&a)?;
            println!("samples={n} format={} out={}", a.format, a.out.display());
            Ok(())
        }
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
