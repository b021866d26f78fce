//! Run configuration and the stages behind the command line: data
//! preparation, gradient extraction, selection, fine-tuning, evaluation,
//! the decile pilot and the strategy comparison report.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{
    bm25_select, dsir_select, gradient_feature_vectors, less_select, perplexities, ppl_select, rds_select,
    representation_features, select_random, Bm25Params, QuerySet,
};
use crate::corpus::{
    build_vocab, dataset_to_jsonl, encode_all, load_dataset, synth_corpus, Instance, Stratum, SynthSpec,
    TokenSequence, Tokenizer,
};
use crate::error::{Error, Result};
use crate::evalmetrics::{evaluate_generation, pilot_deciles, DecileReport, GenerationScores};
use crate::gradstats::{fingerprint_warnings, read_records, records_to_jsonl, Aggregator, GradientRecord, TokenReduction};
use crate::rng::{SplitMix64, Stream};
use crate::selector::{select_strategy, SelectionResult, Strategy};
use crate::tinylm::{
    extract_epoch, extract_frozen, init_model, train, train_with_callback, ExtractMode, LmGradSpace, Model,
    ModelConfig, TrainHyper,
};

pub const DEFAULT_SEED: u64 = 42;

/// Architecture without the vocabulary size, which comes from the tokenizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Defaults to `4 * d_model`.
    pub d_ff: Option<usize>,
    pub max_seq_len: usize,
    pub tie_lm_head: bool,
    pub lm_grad_space: LmGradSpace,
    pub loss_on_eos: bool,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 1,
            n_heads: 2,
            d_ff: None,
            max_seq_len: 16,
            tie_lm_head: false,
            lm_grad_space: LmGradSpace::Logits,
            loss_on_eos: true,
        }
    }
}

impl ModelShape {
    pub fn with_width(d_model: usize) -> Self {
        Self {
            d_model,
            ..Self::default()
        }
    }

    pub fn config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff.unwrap_or(4 * self.d_model),
            vocab_size,
            max_seq_len: self.max_seq_len,
            init_seed: seed,
            tie_lm_head: self.tie_lm_head,
            lm_grad_space: self.lm_grad_space,
            loss_on_eos: self.loss_on_eos,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthCounts {
    pub n_domain: usize,
    pub n_noise: usize,
    pub n_trivial: usize,
}

impl Default for SynthCounts {
    fn default() -> Self {
        Self {
            n_domain: 700,
            n_noise: 150,
            n_trivial: 150,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    pub mode: ExtractMode,
    /// Optimizer steps on the training pool before gradients are measured.
    pub warmup_steps: usize,
    pub warmup_learning_rate: f64,
    pub reduction: TokenReduction,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            mode: ExtractMode::Frozen,
            warmup_steps: 200,
            warmup_learning_rate: 1e-2,
            reduction: TokenReduction::MeanOfNorms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Held-out evaluation instances.
    pub test_size: usize,
    /// Held-out examples the similarity baselines rank against.
    pub query_size: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_size: 100,
            query_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub bm25: Bm25Params,
    /// LESS-style projection width; `None` keeps the full feature length.
    pub projection_dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// JSONL dataset; the synthetic corpus is generated when absent.
    pub dataset: Option<PathBuf>,
    pub synth: SynthCounts,
    pub max_vocab: usize,
    /// Model that is fine-tuned and evaluated.
    pub model: ModelShape,
    /// Model whose gradients drive selection; defaults to `model`.
    pub extractor: Option<ModelShape>,
    pub train: TrainHyper,
    pub extract: ExtractConfig,
    pub strategy: String,
    pub fraction: f64,
    pub strategies: Vec<String>,
    pub fractions: Vec<f64>,
    pub baseline: BaselineConfig,
    pub split: SplitConfig,
    pub out_dir: PathBuf,
    /// Pre-computed gradient records to use instead of extracting.
    pub records: Option<PathBuf>,
    /// Accept records whose provenance does not match this run.
    pub force: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            synth: SynthCounts::default(),
            max_vocab: 256,
            model: ModelShape::default(),
            extractor: None,
            train: TrainHyper {
                epochs: 3,
                ..TrainHyper::desk()
            },
            extract: ExtractConfig::default(),
            strategy: "grads".into(),
            fraction: 50.0,
            strategies: vec!["grads".into(), "random".into()],
            fractions: vec![50.0],
            baseline: BaselineConfig::default(),
            split: SplitConfig::default(),
            out_dir: PathBuf::from("out"),
            records: None,
            force: false,
            seed: DEFAULT_SEED,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = &self.dataset {
            if !p.is_file() {
                return Err(Error::Config(format!("dataset {} does not exist", p.display())));
            }
        }
        if let Some(p) = &self.records {
            if !p.is_file() {
                return Err(Error::Config(format!("records file {} does not exist", p.display())));
            }
        }
        if !(self.fraction > 0.0 && self.fraction <= 100.0) {
            return Err(Error::Config(format!("fraction {} outside (0, 100]", self.fraction)));
        }
        if let Some(f) = self.fractions.iter().find(|f| !(**f > 0.0 && **f <= 100.0)) {
            return Err(Error::Config(format!("fraction {f} outside (0, 100]")));
        }
        for s in self.strategies.iter().chain(std::iter::once(&self.strategy)) {
            s.parse::<Method>()?;
        }
        self.train.validate()?;
        if !(self.extract.warmup_learning_rate > 0.0) {
            return Err(Error::Config("warmup_learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn extractor_shape(&self) -> &ModelShape {
        self.extractor.as_ref().unwrap_or(&self.model)
    }

    /// Fine-tuning hyperparameters with the run seed applied.
    pub fn hyper(&self) -> TrainHyper {
        TrainHyper {
            shuffle_seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Identity of a model's exact parameters.
pub fn model_fingerprint(model: &Model) -> String {
    sha256_hex(model.to_checkpoint_json().as_bytes())[..16].to_string()
}

/// Data for one run: the training pool, the held-out test split and the
/// query slice, all encoded with one tokenizer.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub tokenizer: Tokenizer,
    pub train: Vec<Instance>,
    pub test: Vec<Instance>,
    pub queries: Vec<Instance>,
    pub train_seqs: Vec<TokenSequence>,
    pub test_seqs: Vec<TokenSequence>,
    pub query_seqs: Vec<TokenSequence>,
    /// Hash of the training pool in JSONL form.
    pub train_hash: String,
}

pub fn load_instances(cfg: &RunConfig) -> Result<Vec<Instance>> {
    match &cfg.dataset {
        Some(p) => load_dataset(p),
        None => Ok(synth_corpus(&SynthSpec {
            n_domain: cfg.synth.n_domain,
            n_noise: cfg.synth.n_noise,
            n_trivial: cfg.synth.n_trivial,
            seed: cfg.seed,
        })),
    }
}

/// Test and query instances are drawn from the domain stratum when strata
/// are labelled, otherwise from the whole dataset. The remainder, in
/// dataset order, is the training pool.
pub fn split_instances(all: Vec<Instance>, split: &SplitConfig, seed: u64) -> Result<(Vec<Instance>, Vec<Instance>, Vec<Instance>)> {
    let labelled = all.iter().any(|i| i.stratum.is_some());
    let mut pool: Vec<usize> = (0..all.len())
        .filter(|&i| !labelled || all[i].stratum == Some(Stratum::Domain))
        .collect();
    let held = split.test_size + split.query_size;
    if held >= pool.len() {
        return Err(Error::Config(format!(
            "cannot hold out {held} instances from a pool of {}",
            pool.len()
        )));
    }
    SplitMix64::substream(seed, Stream::Split).shuffle(&mut pool);
    let test_idx: HashSet<usize> = pool[..split.test_size].iter().copied().collect();
    let query_idx: HashSet<usize> = pool[split.test_size..held].iter().copied().collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut queries = Vec::new();
    for (i, inst) in all.into_iter().enumerate() {
        if test_idx.contains(&i) {
            test.push(inst);
        } else if query_idx.contains(&i) {
            queries.push(inst);
        } else {
            train.push(inst);
        }
    }
    Ok((train, test, queries))
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let all = load_instances(cfg)?;
    let (train, test, queries) = split_instances(all, &cfg.split, cfg.seed)?;
    if train.is_empty() {
        return Err(Error::Config("training pool is empty".into()));
    }
    let tokenizer = build_vocab(&train, cfg.max_vocab)?;
    let max_len = cfg.model.max_seq_len.min(cfg.extractor_shape().max_seq_len);
    let train_seqs = encode_all(&tokenizer, &train, max_len)?;
    let test_seqs = encode_all(&tokenizer, &test, max_len)?;
    let query_seqs = encode_all(&tokenizer, &queries, max_len)?;
    let train_hash = sha256_hex(dataset_to_jsonl(&train).as_bytes());
    Ok(Prepared {
        tokenizer,
        train,
        test,
        queries,
        train_seqs,
        test_seqs,
        query_seqs,
        train_hash,
    })
}

/// Gradient records of the training pool plus the model they were measured on.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub records: Vec<GradientRecord>,
    /// The warmed extractor; also the base model for the pilot and the
    /// model-based baselines.
    pub model: Model,
    pub fingerprint: String,
}

/// Fresh extractor model after the configured warmup steps.
pub fn warm_extractor(cfg: &RunConfig, prep: &Prepared) -> Result<Model> {
    let mc = cfg.extractor_shape().config(prep.tokenizer.vocab_size(), cfg.seed);
    let model = init_model(&mc)?;
    let steps = cfg.extract.warmup_steps;
    if steps == 0 {
        return Ok(model);
    }
    let mut hyper = TrainHyper {
        learning_rate: cfg.extract.warmup_learning_rate,
        shuffle_seed: cfg.seed,
        max_steps: Some(steps),
        ..cfg.train.clone()
    };
    hyper.epochs = steps.div_ceil(hyper.steps_per_epoch(prep.train_seqs.len()));
    train(&model, &prep.train_seqs, &hyper)
}

pub fn extract(cfg: &RunConfig, prep: &Prepared) -> Result<Extraction> {
    let warmed = warm_extractor(cfg, prep)?;
    let fingerprint = model_fingerprint(&warmed);
    let bundles = match cfg.extract.mode {
        ExtractMode::Frozen => extract_frozen(&warmed, &prep.train_seqs)?,
        ExtractMode::Online => {
            let hyper = TrainHyper {
                epochs: 1,
                max_steps: None,
                ..cfg.hyper()
            };
            extract_epoch(&warmed, &prep.train_seqs, &hyper, ExtractMode::Online)?.1
        }
    };
    let agg = Aggregator {
        reduction: cfg.extract.reduction,
        model_fingerprint: fingerprint.clone(),
    };
    let records = agg.aggregate_all(&bundles, &prep.train_seqs)?;
    Ok(Extraction {
        records,
        model: warmed,
        fingerprint,
    })
}

/// Comparison selectors that do not use gradient magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Random,
    Bm25,
    Dsir,
    Rds,
    Ppl,
    Less,
}

impl Baseline {
    pub const ALL: [Baseline; 6] = [
        Baseline::Random,
        Baseline::Bm25,
        Baseline::Dsir,
        Baseline::Rds,
        Baseline::Ppl,
        Baseline::Less,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Random => "random",
            Baseline::Bm25 => "bm25",
            Baseline::Dsir => "dsir",
            Baseline::Rds => "rds",
            Baseline::Ppl => "ppl",
            Baseline::Less => "less",
        }
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown baseline {s:?}")))
    }
}

/// Any selection method: a gradient strategy or a baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Gradient(Strategy),
    Baseline(Baseline),
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Gradient(s) => s.name(),
            Method::Baseline(b) => b.name(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Ok(st) = s.parse::<Strategy>() {
            return Ok(Method::Gradient(st));
        }
        s.parse::<Baseline>()
            .map(Method::Baseline)
            .map_err(|_| Error::Invalid(format!("unknown strategy {s:?}")))
    }
}

fn stratum_counts(prep: &Prepared, sel: &SelectionResult) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for i in sel.indices() {
        if let Some(st) = prep.train[i].stratum {
            *counts.entry(st.as_str().to_string()).or_insert(0) += 1;
        }
    }
    counts
}

/// Checks that records describe exactly the training pool, in order.
pub fn check_records(prep: &Prepared, records: &[GradientRecord]) -> Result<()> {
    if records.len() != prep.train.len() {
        return Err(Error::Invalid(format!(
            "{} records for a training pool of {}",
            records.len(),
            prep.train.len()
        )));
    }
    if let Some((r, inst)) = records.iter().zip(&prep.train).find(|(r, i)| r.instance_id != i.id) {
        return Err(Error::Record {
            id: r.instance_id.clone(),
            msg: format!("expected instance {} at this position", inst.id),
        });
    }
    Ok(())
}

pub fn select(
    cfg: &RunConfig,
    prep: &Prepared,
    records: &[GradientRecord],
    base: &Model,
    method: Method,
    percent: f64,
) -> Result<SelectionResult> {
    let ids: Vec<String> = prep.train.iter().map(|i| i.id.clone()).collect();
    let mut sel = match method {
        Method::Gradient(s) => {
            check_records(prep, records)?;
            select_strategy(records, s, percent)?
        }
        Method::Baseline(b) => {
            QuerySet::new(prep.queries.clone(), &prep.train)?;
            let content = |seqs: &[TokenSequence]| seqs.iter().map(TokenSequence::content_tokens).collect::<Vec<_>>();
            match b {
                Baseline::Random => select_random(&ids, percent, cfg.seed)?,
                Baseline::Bm25 => bm25_select(
                    &ids,
                    &content(&prep.train_seqs),
                    &content(&prep.query_seqs),
                    percent,
                    &cfg.baseline.bm25,
                )?,
                Baseline::Dsir => dsir_select(
                    &ids,
                    &content(&prep.train_seqs),
                    &content(&prep.query_seqs),
                    percent,
                    cfg.seed,
                )?,
                Baseline::Rds => rds_select(
                    &representation_features(base, &prep.train_seqs)?,
                    &representation_features(base, &prep.query_seqs)?,
                    percent,
                )?,
                Baseline::Ppl => ppl_select(&ids, &perplexities(base, &prep.train_seqs)?, percent)?,
                Baseline::Less => {
                    let cands = gradient_feature_vectors(base, &prep.train_seqs)?;
                    let queries = gradient_feature_vectors(base, &prep.query_seqs)?;
                    let dim = cfg
                        .baseline
                        .projection_dim
                        .unwrap_or_else(|| cands.first().map_or(1, |c| c.values.len()));
                    less_select(&cands, &queries, percent, dim, cfg.seed)?
                }
            }
        }
    };
    sel.stratum_counts = stratum_counts(prep, &sel);
    Ok(sel)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochScores {
    pub epoch: usize,
    pub train_loss: f64,
    pub bleu: f64,
    pub rouge_l: f64,
    pub meteor: f64,
}

#[derive(Debug, Clone)]
pub struct FineTuneOutcome {
    pub model: Model,
    pub epochs: Vec<EpochScores>,
}

impl FineTuneOutcome {
    /// Scores averaged over the evaluated epochs.
    pub fn mean(&self) -> (f64, f64, f64) {
        let n = self.epochs.len().max(1) as f64;
        let sum = |f: fn(&EpochScores) -> f64| self.epochs.iter().map(f).sum::<f64>() / n;
        (sum(|e| e.bleu), sum(|e| e.rouge_l), sum(|e| e.meteor))
    }
}

pub fn fresh_model(cfg: &RunConfig, prep: &Prepared) -> Result<Model> {
    init_model(&cfg.model.config(prep.tokenizer.vocab_size(), cfg.seed))
}

pub fn evaluate(model: &Model, prep: &Prepared) -> Result<GenerationScores> {
    evaluate_generation(model, &prep.test_seqs)
}

/// Fine-tunes a fresh model on `indices` of the training pool and scores
/// the test split after every epoch.
pub fn finetune(cfg: &RunConfig, prep: &Prepared, indices: &[usize]) -> Result<FineTuneOutcome> {
    let subset: Vec<TokenSequence> = indices.iter().map(|&i| prep.train_seqs[i].clone()).collect();
    let start = fresh_model(cfg, prep)?;
    let mut epochs = Vec::new();
    let (model, _) = train_with_callback(&start, &subset, &cfg.hyper(), |epoch, m, loss| {
        let s = evaluate(m, prep)?;
        epochs.push(EpochScores {
            epoch: epoch + 1,
            train_loss: loss,
            bleu: s.bleu.corpus_score,
            rouge_l: s.rouge_l.corpus_score,
            meteor: s.meteor.corpus_score,
        });
        Ok(())
    })?;
    Ok(FineTuneOutcome { model, epochs })
}

pub fn pilot(prep: &Prepared, ext: &Extraction) -> Result<DecileReport> {
    pilot_deciles(&ext.records, &prep.train_seqs, &ext.model)
}

/// Where the selected instances sit in the ascending `g_grads` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSummary {
    /// Mean percentile (0-100) of the selected instances.
    pub mean_percentile: f64,
    pub p10: f64,
    pub p50: f64,
    pub p90: f64,
}

pub fn gradient_summary(records: &[GradientRecord], indices: &[usize]) -> Option<GradientSummary> {
    if records.is_empty() || indices.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].g_grads.total_cmp(&records[b].g_grads).then(a.cmp(&b)));
    let mut pos = vec![0usize; records.len()];
    for (p, &i) in order.iter().enumerate() {
        pos[i] = p;
    }
    let k = records.len() as f64;
    let mean_percentile = indices.iter().map(|&i| (pos[i] as f64 + 0.5) / k * 100.0).sum::<f64>() / indices.len() as f64;
    let mut g: Vec<f64> = indices.iter().map(|&i| records[i].g_grads).collect();
    g.sort_by(f64::total_cmp);
    let q = |p: f64| crate::selector::quantile_sorted(&g, p);
    Some(GradientSummary {
        mean_percentile,
        p10: q(0.1),
        p50: q(0.5),
        p90: q(0.9),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// `base`, `all`, or the method name.
    pub label: String,
    pub fraction_percent: Option<f64>,
    pub n_train: usize,
    pub bleu: Option<f64>,
    pub rouge_l: Option<f64>,
    pub meteor: Option<f64>,
    pub epochs: Vec<EpochScores>,
    pub stratum_counts: BTreeMap<String, usize>,
    pub gradient_summary: Option<GradientSummary>,
    /// Hash of the selection file contents behind this row.
    pub selection_hash: Option<String>,
    pub seconds: f64,
    pub error: Option<String>,
}

impl ReportRow {
    fn empty(label: &str, fraction_percent: Option<f64>) -> Self {
        Self {
            label: label.to_string(),
            fraction_percent,
            n_train: 0,
            bleu: None,
            rouge_l: None,
            meteor: None,
            epochs: Vec::new(),
            stratum_counts: BTreeMap::new(),
            gradient_summary: None,
            selection_hash: None,
            seconds: 0.0,
            error: None,
        }
    }

    fn fill(&mut self, outcome: &FineTuneOutcome) {
        let (b, r, m) = outcome.mean();
        self.bleu = Some(b);
        self.rouge_l = Some(r);
        self.meteor = Some(m);
        self.epochs = outcome.epochs.clone();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub train_hash: String,
    pub records_hash: String,
    pub extractor_fingerprint: String,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub corpus_stratum_counts: BTreeMap<String, usize>,
    pub rows: Vec<ReportRow>,
    pub seconds: f64,
}

impl ExperimentReport {
    pub fn row(&self, label: &str, fraction: Option<f64>) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.label == label && (fraction.is_none() || r.fraction_percent == fraction))
    }
}

fn all_counts(prep: &Prepared) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for inst in &prep.train {
        if let Some(st) = inst.stratum {
            *counts.entry(st.as_str().to_string()).or_insert(0) += 1;
        }
    }
    counts
}

/// `base` (untrained) and `all` rows followed by one row per
/// (method, fraction) cell. Cell failures are recorded in the row.
pub fn compare(cfg: &RunConfig, prep: &Prepared, ext: &Extraction, methods: &[Method], fractions: &[f64]) -> Result<ExperimentReport> {
    let started = Instant::now();
    let records_hash = sha256_hex(records_to_jsonl(&ext.records).as_bytes());
    let mut rows = Vec::with_capacity(methods.len() * fractions.len() + 2);

    let t = Instant::now();
    let mut base = ReportRow::empty("base", None);
    match fresh_model(cfg, prep).and_then(|m| evaluate(&m, prep)) {
        Ok(s) => {
            base.bleu = Some(s.bleu.corpus_score);
            base.rouge_l = Some(s.rouge_l.corpus_score);
            base.meteor = Some(s.meteor.corpus_score);
        }
        Err(e) => base.error = Some(e.to_string()),
    }
    base.seconds = t.elapsed().as_secs_f64();
    rows.push(base);

    let t = Instant::now();
    let all_idx: Vec<usize> = (0..prep.train.len()).collect();
    let mut all = ReportRow::empty("all", Some(100.0));
    all.n_train = all_idx.len();
    all.stratum_counts = all_counts(prep);
    all.gradient_summary = gradient_summary(&ext.records, &all_idx);
    match finetune(cfg, prep, &all_idx) {
        Ok(o) => all.fill(&o),
        Err(e) => all.error = Some(e.to_string()),
    }
    all.seconds = t.elapsed().as_secs_f64();
    rows.push(all);

    for &method in methods {
        for &pct in fractions {
            let t = Instant::now();
            let mut row = ReportRow::empty(method.name(), Some(pct));
            let result = select(cfg, prep, &ext.records, &ext.model, method, pct).and_then(|sel| {
                let idx = sel.indices();
                row.n_train = idx.len();
                row.stratum_counts = sel.stratum_counts.clone();
                row.gradient_summary = gradient_summary(&ext.records, &idx);
                row.selection_hash = Some(sha256_hex(sel.to_jsonl().as_bytes()));
                finetune(cfg, prep, &idx)
            });
            match result {
                Ok(o) => row.fill(&o),
                Err(e) => row.error = Some(e.to_string()),
            }
            row.seconds = t.elapsed().as_secs_f64();
            log::info!("{} @ {pct}%: bleu {:?} rouge_l {:?}", method, row.bleu, row.rouge_l);
            rows.push(row);
        }
    }

    Ok(ExperimentReport {
        config_hash: cfg.hash(),
        train_hash: prep.train_hash.clone(),
        records_hash,
        extractor_fingerprint: ext.fingerprint.clone(),
        seed: cfg.seed,
        n_train: prep.train.len(),
        n_test: prep.test.len(),
        corpus_stratum_counts: all_counts(prep),
        rows,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// File-name to sha256 map kept in `manifest.json` under the output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: BTreeMap<String, String>,
}

pub const MANIFEST: &str = "manifest.json";

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Writes `name` under `dir`, records its hash in the manifest and returns it.
pub fn write_artifact(dir: &Path, name: &str, contents: &str) -> Result<String> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    let hash = sha256_hex(contents.as_bytes());
    let mut manifest = Manifest::load(dir)?;
    manifest.files.insert(name.to_string(), hash.clone());
    manifest.save(dir)?;
    Ok(hash)
}

pub const RECORDS_FILE: &str = "records.jsonl";
pub const RECORDS_META: &str = "records.meta.json";
pub const EXTRACTOR_FILE: &str = "extractor.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordsMeta {
    pub train_hash: String,
    pub extractor_fingerprint: String,
    pub mode: ExtractMode,
    pub warmup_steps: usize,
    pub count: usize,
    pub seed: u64,
}

/// Runs extraction and writes records, their metadata, the warmed extractor
/// and the tokenizer.
pub fn cmd_extract(cfg: &RunConfig) -> Result<(Prepared, Extraction)> {
    let prep = prepare(cfg)?;
    let ext = extract(cfg, &prep)?;
    let dir = cfg.out_dir.as_path();
    write_artifact(dir, RECORDS_FILE, &records_to_jsonl(&ext.records))?;
    let meta = RecordsMeta {
        train_hash: prep.train_hash.clone(),
        extractor_fingerprint: ext.fingerprint.clone(),
        mode: cfg.extract.mode,
        warmup_steps: cfg.extract.warmup_steps,
        count: ext.records.len(),
        seed: cfg.seed,
    };
    write_artifact(dir, RECORDS_META, &serde_json::to_string_pretty(&meta)?)?;
    write_artifact(dir, EXTRACTOR_FILE, &ext.model.to_checkpoint_json())?;
    write_artifact(dir, "tokenizer.json", &prep.tokenizer.to_json())?;
    Ok((prep, ext))
}

/// Records for this run: the configured file, then `records.jsonl` in the
/// output directory, otherwise a fresh extraction. Loaded records must come
/// from the same training pool unless `force` is set.
pub fn load_or_extract(cfg: &RunConfig) -> Result<(Prepared, Extraction)> {
    let prep = prepare(cfg)?;
    let path = cfg.records.clone().unwrap_or_else(|| cfg.out_dir.join(RECORDS_FILE));
    if !path.is_file() {
        let ext = extract(cfg, &prep)?;
        return Ok((prep, ext));
    }
    let records = read_records(&path)?;
    let meta_path = path.with_file_name(RECORDS_META);
    let meta: Option<RecordsMeta> = match fs::read_to_string(&meta_path) {
        Ok(text) => Some(serde_json::from_str(&text)?),
        Err(_) => None,
    };
    let provenance_ok = meta.as_ref().is_some_and(|m| m.train_hash == prep.train_hash) && check_records(&prep, &records).is_ok();
    if !provenance_ok && !cfg.force {
        return Err(Error::Invalid(format!(
            "records in {} were not produced from this training pool (use --force to override)",
            path.display()
        )));
    }
    check_records(&prep, &records)?;
    let extractor_path = path.with_file_name(EXTRACTOR_FILE);
    let model = if extractor_path.is_file() {
        Model::load(&extractor_path)?
    } else {
        warm_extractor(cfg, &prep)?
    };
    let fingerprint = model_fingerprint(&model);
    for w in fingerprint_warnings(&records, &fingerprint) {
        log::warn!("{w}");
    }
    Ok((prep, Extraction { records, model, fingerprint }))
}

pub fn selection_stem(method: Method, percent: f64) -> String {
    format!("select_{}_{}", method.name(), percent)
}

pub fn cmd_select(cfg: &RunConfig, method: Method, percent: f64) -> Result<SelectionResult> {
    let (prep, ext) = load_or_extract(cfg)?;
    let sel = select(cfg, &prep, &ext.records, &ext.model, method, percent)?;
    let stem = selection_stem(method, percent);
    let records_hash = sha256_hex(records_to_jsonl(&ext.records).as_bytes());
    let dir = cfg.out_dir.as_path();
    write_artifact(dir, &format!("{stem}.jsonl"), &sel.to_jsonl())?;
    write_artifact(
        dir,
        &format!("{stem}.meta.json"),
        &serde_json::to_string_pretty(&sel.metadata_json(Some(&records_hash)))?,
    )?;
    Ok(sel)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub selection: Option<String>,
    pub selection_hash: Option<String>,
    pub n_train: usize,
    pub epochs: Vec<EpochScores>,
}

/// Fine-tunes on a selection file (or the whole pool) and writes the model
/// checkpoint and a per-epoch log.
pub fn cmd_train(cfg: &RunConfig, selection: Option<&Path>) -> Result<TrainLog> {
    let prep = prepare(cfg)?;
    let (indices, hash) = match selection {
        Some(p) => {
            let ids = crate::selector::read_selection_ids(p)?;
            let pos: HashMap<&str, usize> = prep.train.iter().enumerate().map(|(i, x)| (x.id.as_str(), i)).collect();
            let idx = ids
                .iter()
                .map(|id| {
                    pos.get(id.as_str()).copied().ok_or_else(|| Error::Record {
                        id: id.clone(),
                        msg: "selected id is not in the training pool".into(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            (idx, Some(file_sha256(p)?))
        }
        None => ((0..prep.train.len()).collect(), None),
    };
    let outcome = finetune(cfg, &prep, &indices)?;
    let dir = cfg.out_dir.as_path();
    write_artifact(dir, "model.json", &outcome.model.to_checkpoint_json())?;
    let log = TrainLog {
        selection: selection.map(|p| p.display().to_string()),
        selection_hash: hash,
        n_train: indices.len(),
        epochs: outcome.epochs,
    };
    write_artifact(dir, "train_log.json", &serde_json::to_string_pretty(&log)?)?;
    Ok(log)
}

pub fn cmd_eval(cfg: &RunConfig, model_path: &Path) -> Result<GenerationScores> {
    let prep = prepare(cfg)?;
    let model = Model::load(model_path)?;
    if model.config.vocab_size != prep.tokenizer.vocab_size() {
        return Err(Error::Invalid(format!(
            "model vocabulary {} does not match tokenizer {}",
            model.config.vocab_size,
            prep.tokenizer.vocab_size()
        )));
    }
    let scores = evaluate(&model, &prep)?;
    write_artifact(&cfg.out_dir, "eval.json", &serde_json::to_string_pretty(&scores)?)?;
    Ok(scores)
}

pub fn cmd_pilot(cfg: &RunConfig) -> Result<DecileReport> {
    let (prep, ext) = load_or_extract(cfg)?;
    let report = pilot(&prep, &ext)?;
    write_artifact(&cfg.out_dir, "pilot.csv", &report.to_csv())?;
    write_artifact(&cfg.out_dir, "pilot.json", &serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

pub fn cmd_compare(cfg: &RunConfig) -> Result<ExperimentReport> {
    let (prep, ext) = load_or_extract(cfg)?;
    let methods = cfg.strategies.iter().map(|s| s.parse()).collect::<Result<Vec<Method>>>()?;
    let report = compare(cfg, &prep, &ext, &methods, &cfg.fractions)?;
    write_artifact(&cfg.out_dir, "report.json", &serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf> {
    let data = load_instances(&RunConfig {
        dataset: None,
        ..cfg.clone()
    })?;
    write_artifact(&cfg.out_dir, "dataset.jsonl", &dataset_to_jsonl(&data))?;
    Ok(cfg.out_dir.join("dataset.jsonl"))
}
