//! Config-driven command-line frontend.
//!
//! Subcommands: `preprocess`, `train`, `evaluate`, `crossval`,
//! `gridsearch`, `report`. Every run is a pure function of
//! (config, input files, seed): flag values override config-file values,
//! which override built-in defaults, and all randomness flows from the
//! explicit seed. Reruns produce byte-identical outputs except for the
//! labelled `timestamp` field in metrics reports.

use crate::corpus::{class_report, load_csv, stratified_holdout, write_csv, Dataset};
use crate::embeddings::PretrainedVectors;
use crate::error::{Error, Result};
use crate::metrics::{write_roc_csv, ConfusionCounts, RocPoint};
use crate::models::{load_checkpoint, save_checkpoint, Arch, HyperParams, Model};
use crate::parallel;
use crate::tensor::Rng;
use crate::textproc::{NormalizeOptions, RawDocument, StopwordList, Vocabulary};
use crate::train::{
    self, cross_validate, default_grid, encode_all, fit, grid_search,
    CvResult, EvalMetrics, GridSpec, GridValue, PreparedDoc, TrainHistory, TrainSetup,
};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(
    name = "urdusent",
    about = "Document-level Urdu sentiment classification: preprocessing, training, evaluation and reporting over CSV corpora"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Clean a corpus: normalization, tokenization, stopword removal;
    /// writes the cleaned corpus, the vocabulary and a statistics report.
    Preprocess(CommonArgs),
    /// Train one architecture on a stratified 80/20 split and write the
    /// checkpoint, training history and held-out metrics.
    Train(CommonArgs),
    /// Evaluate a saved checkpoint on a dataset.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Stratified k-fold cross-validation (defaults to 3 folds).
    Crossval {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of folds.
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Exhaustive grid search scored by cross-validated mean accuracy.
    Gridsearch {
        #[command(flatten)]
        common: CommonArgs,
        /// TOML file with a [grid] table mapping hyperparameter names to
        /// candidate lists; the Table-3-shaped default grid when absent.
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Side-by-side model x dataset comparison table plus ROC CSVs from
    /// metrics files produced by train/evaluate/crossval.
    Report {
        /// metrics.json files.
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        /// Output directory.
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

/// Flags shared by the pipeline commands; each overrides its config-file
/// counterpart.
#[derive(Args, Debug, Default, Clone)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input CSV corpus.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Pretrained word-vector file.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Architecture tag: bilstm | cnn | cnn-bilstm | bilstm-slmfcnn.
    #[arg(long)]
    pub arch: Option<String>,
    /// Seed for every random choice in the run.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for parallel sections.
    #[arg(long)]
    pub jobs: Option<usize>,
}

// ---------------------------------------------------------------------------
// Run configuration

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub text_column: String,
    pub label_column: String,
    /// Dataset display name; defaults to the file stem.
    pub name: Option<String>,
    pub label_map: BTreeMap<String, u8>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            text_column: "text".into(),
            label_column: "label".into(),
            name: None,
            label_map: BTreeMap::from([("positive".into(), 1), ("negative".into(), 0)]),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingsConfig {
    pub path: Option<PathBuf>,
    /// Keep pretrained rows fixed during training.
    pub freeze: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub strip_diacritics: bool,
    /// Stopword file overriding the shipped default list.
    pub stopwords: Option<PathBuf>,
    pub min_freq: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            strip_diacritics: false,
            stopwords: None,
            min_freq: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub embeddings: EmbeddingsConfig,
    pub preprocess: PreprocessConfig,
    pub hyperparams: HyperParams,
    pub arch: String,
    pub seed: u64,
    pub out: PathBuf,
    /// Held-out fraction for the train command's stratified split.
    pub holdout_fraction: f64,
    /// Fraction of the training split reserved for early stopping;
    /// 0 disables early stopping.
    pub val_fraction: f64,
    pub folds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            embeddings: EmbeddingsConfig::default(),
            preprocess: PreprocessConfig::default(),
            hyperparams: HyperParams::default(),
            arch: Arch::BilstmSlmfcnn.tag().into(),
            seed: 42,
            out: PathBuf::from("out"),
            holdout_fraction: 0.2,
            val_fraction: 0.15,
            folds: 3,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(toml::from_str(&text)?)
    }

    fn apply(&mut self, args: &CommonArgs) {
        if let Some(p) = &args.data {
            self.data.path = Some(p.clone());
        }
        if let Some(p) = &args.embeddings {
            self.embeddings.path = Some(p.clone());
        }
        if let Some(a) = &args.arch {
            self.arch = a.clone();
        }
        if let Some(s) = args.seed {
            self.seed = s;
        }
        if let Some(o) = &args.out {
            self.out = o.clone();
        }
    }

    pub fn arch(&self) -> Result<Arch> {
        self.arch.parse()
    }

    /// Check value ranges and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        self.arch()?;
        self.hyperparams.validate()?;
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config(format!(
                "holdout_fraction {} outside [0, 1)",
                self.holdout_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction {} outside [0, 1)",
                self.val_fraction
            )));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("folds {} must be >= 2", self.folds)));
        }
        if self.preprocess.min_freq == 0 {
            return Err(Error::Config("min_freq must be >= 1".into()));
        }
        for (what, path) in [
            ("data", self.data.path.as_deref()),
            ("embeddings", self.embeddings.path.as_deref()),
            ("stopwords", self.preprocess.stopwords.as_deref()),
        ] {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(Error::Config(format!(
                        "{what} file {} does not exist",
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    fn data_path(&self) -> Result<&Path> {
        self.data.path.as_deref().ok_or_else(|| {
            Error::Config("no dataset given: pass --data or set [data].path".into())
        })
    }

    fn dataset_name(&self) -> String {
        match (&self.data.name, &self.data.path) {
            (Some(name), _) => name.clone(),
            (None, Some(path)) => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into()),
            (None, None) => "dataset".into(),
        }
    }

    fn normalize_options(&self) -> NormalizeOptions {
        NormalizeOptions {
            strip_diacritics: self.preprocess.strip_diacritics,
        }
    }

    fn stopwords(&self) -> Result<StopwordList> {
        match &self.preprocess.stopwords {
            Some(path) => StopwordList::from_file(path),
            None => Ok(StopwordList::default_urdu().clone()),
        }
    }

    fn load_dataset(&self) -> Result<Dataset> {
        load_csv(
            self.data_path()?,
            &self.data.text_column,
            &self.data.label_column,
            &self.data.label_map,
            &self.dataset_name(),
        )
    }

    fn load_vectors(&self) -> Result<Option<PretrainedVectors>> {
        match &self.embeddings.path {
            Some(path) => Ok(Some(PretrainedVectors::load(
                path,
                Some(self.hyperparams.embedding_dim),
            )?)),
            None => Ok(None),
        }
    }

    fn train_setup(&self) -> Result<TrainSetup> {
        Ok(TrainSetup {
            arch: self.arch()?,
            hp: self.hyperparams.clone(),
            min_freq: self.preprocess.min_freq,
            freeze_embeddings: self.embeddings.freeze,
        })
    }
}

fn resolve(args: &CommonArgs) -> Result<RunConfig> {
    let mut config = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    config.apply(args);
    config.validate()?;
    if let Some(jobs) = args.jobs {
        parallel::configure_threads(jobs);
    }
    Ok(config)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess(args) => cmd_preprocess(&resolve(&args)?),
        Command::Train(args) => cmd_train(&resolve(&args)?),
        Command::Evaluate { common, checkpoint } => {
            cmd_evaluate(&resolve(&common)?, &checkpoint)
        }
        Command::Crossval { common, folds } => {
            let mut config = resolve(&common)?;
            if let Some(k) = folds {
                config.folds = k;
                config.validate()?;
            }
            cmd_crossval(&config)
        }
        Command::Gridsearch { common, grid } => {
            let config = resolve(&common)?;
            let grid = match grid {
                Some(path) => load_grid_file(&path)?,
                None => default_grid(),
            };
            cmd_gridsearch(&config, &grid)
        }
        Command::Report { metrics, out } => cmd_report(&metrics, &out),
    }
}

// ---------------------------------------------------------------------------
// Metrics report file (stable JSON contract)

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RocJson {
    /// Formatted with 17 significant digits; "inf"/"-inf" at the sentinels.
    pub threshold: String,
    pub fpr: f64,
    pub tpr: f64,
}

impl From<&RocPoint> for RocJson {
    fn from(p: &RocPoint) -> Self {
        RocJson {
            threshold: format!("{:.16e}", p.threshold),
            fpr: p.fpr,
            tpr: p.tpr,
        }
    }
}

impl RocJson {
    pub fn to_point(&self) -> Result<RocPoint> {
        let threshold = self
            .threshold
            .parse::<f64>()
            .map_err(|e| Error::Config(format!("bad roc threshold `{}`: {e}", self.threshold)))?;
        Ok(RocPoint {
            threshold,
            fpr: self.fpr,
            tpr: self.tpr,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub f1: f64,
    pub accuracy: f64,
    pub auc: f64,
    pub confusion: ConfusionCounts,
}

/// The metrics.json schema consumed by `report`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub arch: String,
    pub dataset: String,
    /// "holdout", "evaluate" or "crossval".
    pub split: String,
    pub seed: u64,
    /// Unix seconds; the only field that varies between identical reruns.
    pub timestamp: u64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub auc: f64,
    pub sensitivity: f64,
    pub fpr_eq4: f64,
    pub specificity: f64,
    pub confusion: ConfusionCounts,
    pub roc: Vec<RocJson>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_fold: Option<Vec<FoldReport>>,
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn metrics_report(
    config: &RunConfig,
    split: &str,
    metrics: &EvalMetrics,
    roc: &[RocPoint],
    per_fold: Option<Vec<FoldReport>>,
) -> MetricsReport {
    MetricsReport {
        schema_version: 1,
        arch: config.arch.clone(),
        dataset: config.dataset_name(),
        split: split.into(),
        seed: config.seed,
        timestamp: now_unix(),
        f1: metrics.f1,
        precision: metrics.precision,
        recall: metrics.recall,
        accuracy: metrics.accuracy,
        auc: metrics.auc,
        sensitivity: metrics.sensitivity,
        fpr_eq4: metrics.fpr_eq4,
        specificity: metrics.specificity,
        confusion: metrics.confusion,
        roc: roc.iter().map(RocJson::from).collect(),
        per_fold,
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Commands

#[derive(Serialize)]
struct PreprocessStats {
    dataset: String,
    documents: usize,
    dropped_empty: usize,
    class_report: crate::corpus::ClassReport,
    token_count: usize,
    vocab_size: usize,
    min_freq: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    embedding_coverage: Option<f64>,
}

pub fn cmd_preprocess(config: &RunConfig) -> Result<()> {
    let out = &config.out;
    std::fs::create_dir_all(out)?;
    let ds = config.load_dataset()?;
    let stops = config.stopwords()?;
    let (prepared, dropped) = train::prepare_dataset(&ds, &config.normalize_options(), &stops);
    if prepared.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    // cleaned corpus, loadable by `train` with the same label map
    let cleaned = Dataset {
        documents: prepared
            .iter()
            .map(|d| RawDocument {
                text: d.tokens.join(" "),
                label: d.label,
            })
            .collect(),
        name: ds.name.clone(),
        label_map: ds.label_map.clone(),
    };
    write_csv(&cleaned, &out.join("cleaned.csv"))?;

    let corpus: Vec<Vec<String>> = prepared.iter().map(|d| d.tokens.clone()).collect();
    let vocab = Vocabulary::build(&corpus, config.preprocess.min_freq)?;
    write_vocab_tsv(&vocab, &corpus, &out.join("vocab.tsv"))?;

    let embedding_coverage = match config.load_vectors()? {
        Some(vectors) => {
            let mut rng = Rng::new(config.seed).child(0xC0);
            let emb = crate::embeddings::EmbeddingMatrix::from_pretrained(
                &vectors, &vocab, &mut rng, true,
            );
            Some(emb.coverage)
        }
        None => None,
    };

    let stats = PreprocessStats {
        dataset: cleaned.name.clone(),
        documents: prepared.len(),
        dropped_empty: dropped,
        class_report: class_report(&cleaned),
        token_count: corpus.iter().map(Vec::len).sum(),
        vocab_size: vocab.size(),
        min_freq: config.preprocess.min_freq,
        embedding_coverage,
    };
    write_json(&stats, &out.join("stats.json"))?;

    println!(
        "preprocess: {} documents ({} dropped empty), {} tokens, vocabulary {}{} -> {}",
        stats.documents,
        stats.dropped_empty,
        stats.token_count,
        stats.vocab_size,
        stats
            .embedding_coverage
            .map(|c| format!(", embedding coverage {c:.3}"))
            .unwrap_or_default(),
        out.display()
    );
    Ok(())
}

fn write_vocab_tsv(vocab: &Vocabulary, corpus: &[Vec<String>], path: &Path) -> Result<()> {
    use std::io::Write;
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for doc in corpus {
        for tok in doc {
            *freq.entry(tok.as_str()).or_insert(0) += 1;
        }
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "id\ttoken\tfreq")?;
    for (id, token) in vocab.id_ordered_tokens().iter().enumerate() {
        let f = freq.get(token.as_str()).copied().unwrap_or(0);
        writeln!(file, "{id}\t{token}\t{f}")?;
    }
    Ok(())
}

fn write_history_csv(history: &TrainHistory, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["epoch", "train_loss", "train_accuracy", "val_loss", "val_accuracy"])?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.17}")).unwrap_or_default();
    for e in &history.epochs {
        writer.write_record([
            e.epoch.to_string(),
            format!("{:.17}", e.train_loss),
            format!("{:.17}", e.train_accuracy),
            fmt(e.val_loss),
            fmt(e.val_accuracy),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

pub fn cmd_train(config: &RunConfig) -> Result<()> {
    let out = &config.out;
    std::fs::create_dir_all(out)?;
    let ds = config.load_dataset()?;
    let stops = config.stopwords()?;
    let (prepared, _) = train::prepare_dataset(&ds, &config.normalize_options(), &stops);
    if prepared.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let labels: Vec<u8> = prepared.iter().map(|d| d.label).collect();
    let (train_idx, test_idx) = stratified_holdout(&labels, config.holdout_fraction, config.seed);

    // carve the early-stopping set out of the training split
    let train_labels: Vec<u8> = train_idx.iter().map(|&i| labels[i]).collect();
    let (inner_train, inner_val) = stratified_holdout(&train_labels, config.val_fraction, config.seed ^ 1);
    let train_docs: Vec<&PreparedDoc> = inner_train.iter().map(|&i| &prepared[train_idx[i]]).collect();
    let val_docs: Vec<&PreparedDoc> = inner_val.iter().map(|&i| &prepared[train_idx[i]]).collect();
    let test_docs: Vec<&PreparedDoc> = test_idx.iter().map(|&i| &prepared[i]).collect();

    let setup = config.train_setup()?;
    let vectors = config.load_vectors()?;
    let trial_rng = Rng::new(config.seed);
    let (mut model, vocab) = train::build_trial(&setup, vectors.as_ref(), &train_docs, &trial_rng)?;

    let train_set = encode_all(&train_docs, &vocab, setup.hp.max_len)?;
    let val_set = encode_all(&val_docs, &vocab, setup.hp.max_len)?;
    let test_set = encode_all(&test_docs, &vocab, setup.hp.max_len)?;

    let history = fit(&mut model, &train_set, &val_set, &trial_rng)?;
    write_history_csv(&history, &out.join("history.csv"))?;
    save_checkpoint(&model, &vocab, &out.join("model.ckpt"))?;

    let (metrics, roc) = evaluate_with_roc(&model, &test_set)?;
    let report = metrics_report(config, "holdout", &metrics, &roc, None);
    write_json(&report, &out.join("metrics.json"))?;

    println!(
        "train[{}]: {} train / {} val / {} test docs, {} epochs; held-out accuracy {:.4}, f1 {:.4}, auc {:.4} -> {}",
        config.arch,
        train_set.len(),
        val_set.len(),
        test_set.len(),
        history.epochs.len(),
        metrics.accuracy,
        metrics.f1,
        metrics.auc,
        out.display()
    );
    Ok(())
}

fn evaluate_with_roc(model: &Model, docs: &[crate::textproc::TokenizedDoc]) -> Result<(EvalMetrics, Vec<RocPoint>)> {
    let scores = train::batch_scores(model, docs)?;
    let labels: Vec<u8> = docs.iter().map(|d| d.label).collect();
    let metrics = train::evaluate_scores(&scores, &labels)?;
    let roc = crate::metrics::roc_curve(&scores, &labels)?;
    Ok((metrics, roc))
}

pub fn cmd_evaluate(config: &RunConfig, checkpoint: &Path) -> Result<()> {
    let out = &config.out;
    std::fs::create_dir_all(out)?;
    let (model, vocab) = load_checkpoint(checkpoint)?;
    let ds = config.load_dataset()?;
    let stops = config.stopwords()?;
    let (prepared, _) = train::prepare_dataset(&ds, &config.normalize_options(), &stops);
    let refs: Vec<&PreparedDoc> = prepared.iter().collect();
    let docs = encode_all(&refs, &vocab, model.hp.max_len)?;

    let (metrics, roc) = evaluate_with_roc(&model, &docs)?;
    let mut report = metrics_report(config, "evaluate", &metrics, &roc, None);
    report.arch = model.arch.tag().into();
    write_json(&report, &out.join("metrics.json"))?;

    println!(
        "evaluate[{}]: {} docs; accuracy {:.4}, f1 {:.4}, auc {:.4} -> {}",
        model.arch,
        docs.len(),
        metrics.accuracy,
        metrics.f1,
        metrics.auc,
        out.display()
    );
    Ok(())
}

fn fold_reports(cv: &CvResult) -> Vec<FoldReport> {
    cv.per_fold
        .iter()
        .enumerate()
        .map(|(fold, m)| FoldReport {
            fold,
            f1: m.f1,
            accuracy: m.accuracy,
            auc: m.auc,
            confusion: m.confusion,
        })
        .collect()
}

fn write_crossval_csv(cv: &CvResult, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["fold", "f1", "accuracy", "auc"])?;
    for (fold, m) in cv.per_fold.iter().enumerate() {
        writer.write_record([
            fold.to_string(),
            format!("{:.17}", m.f1),
            format!("{:.17}", m.accuracy),
            format!("{:.17}", m.auc),
        ])?;
    }
    writer.write_record([
        "mean".to_string(),
        format!("{:.17}", cv.mean_f1),
        format!("{:.17}", cv.mean_accuracy),
        format!("{:.17}", cv.mean_auc),
    ])?;
    writer.flush()?;
    Ok(())
}

pub fn cmd_crossval(config: &RunConfig) -> Result<()> {
    let out = &config.out;
    std::fs::create_dir_all(out)?;
    let ds = config.load_dataset()?;
    let stops = config.stopwords()?;
    let (prepared, _) = train::prepare_dataset(&ds, &config.normalize_options(), &stops);
    let setup = config.train_setup()?;
    let vectors = config.load_vectors()?;

    let cv = cross_validate(&setup, vectors.as_ref(), &prepared, config.folds, config.seed)?;
    write_crossval_csv(&cv, &out.join("crossval.csv"))?;

    // pooled scores across held-out folds give the summary confusion + ROC
    let (scores, labels): (Vec<f64>, Vec<u8>) = cv.pooled.iter().copied().unzip();
    let pooled = train::evaluate_scores(&scores, &labels)?;
    let roc = crate::metrics::roc_curve(&scores, &labels)?;
    let mut summary = EvalMetrics {
        accuracy: cv.mean_accuracy,
        f1: cv.mean_f1,
        auc: cv.mean_auc,
        ..pooled
    };
    summary.confusion = train::evaluate_scores(&scores, &labels)?.confusion;
    let report = metrics_report(config, "crossval", &summary, &roc, Some(fold_reports(&cv)));
    write_json(&report, &out.join("metrics.json"))?;

    println!(
        "crossval[{}] k={}: mean accuracy {:.4}, f1 {:.4}, auc {:.4} -> {}",
        config.arch,
        config.folds,
        cv.mean_accuracy,
        cv.mean_f1,
        cv.mean_auc,
        out.display()
    );
    Ok(())
}

/// Parse a `[grid]` table: hyperparameter name -> candidate list. Axes are
/// enumerated in lexicographic name order so runs are reproducible no
/// matter how the file is written.
pub fn load_grid_file(path: &Path) -> Result<GridSpec> {
    #[derive(Deserialize)]
    struct GridFile {
        grid: BTreeMap<String, Vec<toml::Value>>,
    }
    let text = std::fs::read_to_string(path)?;
    let parsed: GridFile = toml::from_str(&text)?;
    let mut axes = Vec::new();
    for (key, values) in parsed.grid {
        let mut converted = Vec::with_capacity(values.len());
        for v in values {
            converted.push(match v {
                toml::Value::Float(f) => GridValue::Float(f),
                toml::Value::Integer(i) if i >= 0 => GridValue::Int(i as usize),
                toml::Value::String(s) => GridValue::Text(s),
                other => {
                    return Err(Error::Config(format!(
                        "grid axis `{key}`: unsupported value {other}"
                    )))
                }
            });
        }
        axes.push((key, converted));
    }
    Ok(GridSpec { axes })
}

pub fn cmd_gridsearch(config: &RunConfig, grid: &GridSpec) -> Result<()> {
    let out = &config.out;
    std::fs::create_dir_all(out)?;
    let ds = config.load_dataset()?;
    let stops = config.stopwords()?;
    let (prepared, _) = train::prepare_dataset(&ds, &config.normalize_options(), &stops);
    let setup = config.train_setup()?;
    let vectors = config.load_vectors()?;

    let result = grid_search(
        &setup,
        vectors.as_ref(),
        &prepared,
        grid,
        config.folds,
        config.seed,
    )?;

    // full results table: one row per combination
    let mut writer = csv::Writer::from_path(out.join("gridsearch.csv"))?;
    let mut header: Vec<String> = vec!["combo".into()];
    header.extend(grid.axes.iter().map(|(name, _)| name.clone()));
    for fold in 0..config.folds {
        header.push(format!("fold{fold}_accuracy"));
    }
    header.extend([
        "mean_accuracy".to_string(),
        "mean_f1".to_string(),
        "mean_auc".to_string(),
        "best".to_string(),
    ]);
    writer.write_record(&header)?;
    for combo in &result.combos {
        let mut row: Vec<String> = vec![combo.index.to_string()];
        row.extend(combo.assignment.iter().map(|(_, v)| v.to_string()));
        for m in &combo.cv.per_fold {
            row.push(format!("{:.17}", m.accuracy));
        }
        row.extend([
            format!("{:.17}", combo.cv.mean_accuracy),
            format!("{:.17}", combo.cv.mean_f1),
            format!("{:.17}", combo.cv.mean_auc),
            (combo.index == result.best).to_string(),
        ]);
        writer.write_record(&row)?;
    }
    writer.flush()?;
    drop(writer);

    // best config, re-loadable by `train`
    let mut best_config = config.clone();
    best_config.hyperparams = result.best_hp.clone();
    let text = toml::to_string_pretty(&best_config)
        .map_err(|e| Error::Config(format!("cannot serialize best config: {e}")))?;
    std::fs::write(out.join("best_config.toml"), text)?;

    let best = &result.combos[result.best];
    println!(
        "gridsearch[{}]: {} combinations x {} folds; best #{} ({}) mean accuracy {:.4} -> {}",
        config.arch,
        result.combos.len(),
        config.folds,
        best.index,
        best.assignment
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(", "),
        best.cv.mean_accuracy,
        out.display()
    );
    Ok(())
}

pub fn cmd_report(metrics_files: &[PathBuf], out: &Path) -> Result<()> {
    if metrics_files.is_empty() {
        return Err(Error::Config("report needs at least one metrics file".into()));
    }
    std::fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for path in metrics_files {
        let text = std::fs::read_to_string(path)?;
        let report: MetricsReport = serde_json::from_str(&text).map_err(|e| Error::Config(
            format!("{}: malformed metrics file: {e}", path.display()),
        ))?;
        rows.push((path.clone(), report));
    }

    let mut writer = csv::Writer::from_path(out.join("comparison.csv"))?;
    writer.write_record(["model", "dataset", "split", "f1", "accuracy", "auc"])?;
    for (_, r) in &rows {
        writer.write_record([
            r.arch.clone(),
            r.dataset.clone(),
            r.split.clone(),
            format!("{:.17}", r.f1),
            format!("{:.17}", r.accuracy),
            format!("{:.17}", r.auc),
        ])?;
    }
    writer.flush()?;
    drop(writer);

    // ROC point files per run
    for (path, r) in &rows {
        if r.roc.is_empty() {
            continue;
        }
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        let parent = path
            .parent()
            .and_then(|p| p.file_name())
            .map(|s| format!("{}_", s.to_string_lossy()))
            .unwrap_or_default();
        let roc_points: Vec<RocPoint> = r
            .roc
            .iter()
            .map(RocJson::to_point)
            .collect::<Result<_>>()?;
        let file = std::fs::File::create(out.join(format!("{parent}{stem}_roc.csv")))?;
        write_roc_csv(&roc_points, std::io::BufWriter::new(file))?;
    }

    // side-by-side table, models as rows grouped per dataset
    println!("{:<18} {:<16} {:<9} {:>8} {:>8} {:>8}", "model", "dataset", "split", "F1", "A", "AUC");
    for (_, r) in &rows {
        println!(
            "{:<18} {:<16} {:<9} {:>8.2} {:>8.2} {:>8.2}",
            r.arch,
            r.dataset,
            r.split,
            100.0 * r.f1,
            100.0 * r.accuracy,
            100.0 * r.auc
        );
    }
    println!("wrote {}", out.join("comparison.csv").display());
    Ok(())
}
