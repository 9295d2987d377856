//! End-to-end runs: corpus construction, tokenizer, feature provider,
//! training, generation, evaluation and optional semi-supervised
//! retraining, with every artifact written under one output directory.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bpe::{default_reserved, pretokenize, train_bpe, BpeModel};
use crate::corpus::{load_corpus, save_corpus, Document, DtiTriplet, LabeledExample, Lexicons};
use crate::datagen::{self, GenConfig};
use crate::error::{Error, Result};
use crate::fuzzymatch::{filter_and_split, EditBudget, Splits};
use crate::linearize::{serialize_gold, TripletOrder};
use crate::manifest::{DirLock, RunManifest};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{
    encode_examples, predict_all, train, Adam, AdamConfig, Checkpoint, DecodeConfig, FeatureProvider, MaskedEncoder,
    ModelConfig, PretrainConfig, Seq2Seq, TrainConfig, TrainReport,
};
use crate::par::Exec;
use crate::semisup::{ds_label, kd_label, merge_and_upsample, rule_filter, save_pseudo, PseudoLabeledExample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusSource {
    /// Generated documents; the unlabeled share becomes the pseudo-labeling pool.
    Synthetic(GenConfig),
    Files {
        raw: PathBuf,
        lexicons: PathBuf,
        #[serde(default)]
        pool: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    /// Keep this many best-scoring examples; all when unset.
    pub top_k: Option<usize>,
    /// Sizes of the (test, valid, train) splits.
    pub split: (usize, usize, usize),
    pub budget: EditBudget,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            top_k: None,
            split: (64, 32, 256),
            budget: EditBudget::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Random,
    Masked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    /// Width of random features.
    pub dim: usize,
    pub pretrain: PretrainConfig,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: ProviderKind::Random,
            dim: 64,
            pretrain: PretrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoMethod {
    /// Occurrence filtration, then agreement with the trained model.
    Kd,
    Ds,
    DsWithInteraction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SemisupConfig {
    pub method: PseudoMethod,
    pub min_occurrence: usize,
    pub upsample: usize,
    /// Fine-tuning steps from the labeled-only model.
    pub steps: u64,
    pub optimizer: AdamConfig,
    /// Also fine-tune on the upsampled labeled data alone for the same
    /// number of steps, as a comparison.
    pub control: bool,
}

impl Default for SemisupConfig {
    fn default() -> Self {
        SemisupConfig {
            method: PseudoMethod::Kd,
            min_occurrence: 10,
            upsample: 5,
            steps: 400,
            optimizer: AdamConfig {
                lr: 5e-4,
                warmup: 50,
                clip_norm: Some(1.0),
                ..AdamConfig::default()
            },
            control: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub source: CorpusSource,
    pub corpus: CorpusConfig,
    pub bpe_merges: usize,
    pub provider: ProviderConfig,
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    pub train: TrainConfig,
    pub semisup: Option<SemisupConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            source: CorpusSource::Synthetic(GenConfig::default()),
            corpus: CorpusConfig::default(),
            bpe_merges: 1000,
            provider: ProviderConfig::default(),
            model: ModelConfig {
                layers: 2,
                dim: 64,
                heads: 4,
                ffn_dim: 128,
                dropout: 0.1,
                attn_dropout: 0.0,
                label_smoothing: 0.1,
                max_source_len: 256,
                max_target_len: 96,
                ..ModelConfig::default()
            },
            optimizer: AdamConfig {
                lr: 2e-3,
                warmup: 100,
                clip_norm: Some(1.0),
                ..AdamConfig::default()
            },
            train: TrainConfig {
                max_steps: 1000,
                token_budget: 1000,
                eval_every: 100,
                patience: 4,
                ..TrainConfig::default()
            },
            semisup: None,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// Loaded or generated inputs of a run.
#[derive(Debug, Clone)]
pub struct SourceData {
    pub labeled: Vec<LabeledExample>,
    pub lexicons: Lexicons,
    pub pool: Vec<Document>,
}

pub fn load_source(source: &CorpusSource) -> Result<SourceData> {
    match source {
        CorpusSource::Synthetic(gen) => {
            let g = datagen::generate(gen)?;
            Ok(SourceData {
                labeled: g.labeled,
                lexicons: g.lexicons,
                pool: g.unlabeled,
            })
        }
        CorpusSource::Files { raw, lexicons, pool } => Ok(SourceData {
            labeled: load_corpus(raw)?,
            lexicons: Lexicons::load_dir(lexicons)?,
            pool: match pool {
                Some(p) => crate::corpus::load_documents(p)?,
                None => Vec::new(),
            },
        }),
    }
}

pub fn build_corpus(
    examples: &[LabeledExample],
    lexicons: &Lexicons,
    cfg: &CorpusConfig,
    seed: u64,
    exec: Exec,
) -> Result<Splits> {
    let top_k = cfg.top_k.unwrap_or(examples.len());
    filter_and_split(examples, lexicons, top_k, cfg.split, seed, &cfg.budget, exec)
}

/// Texts a tokenizer is fitted on: pre-tokenized documents and their
/// linearized gold triplets.
pub fn tokenizer_texts(examples: &[LabeledExample], order: TripletOrder) -> Result<Vec<String>> {
    let mut texts: Vec<String> = examples.iter().map(|e| pretokenize(&e.document.text())).collect();
    for e in examples {
        texts.push(serialize_gold(&e.triplets, order)?);
    }
    Ok(texts)
}

pub fn train_tokenizer(examples: &[LabeledExample], merges: usize, order: TripletOrder) -> Result<BpeModel> {
    train_bpe(&tokenizer_texts(examples, order)?, merges, &default_reserved())
}

pub fn build_provider(
    cfg: &ProviderConfig,
    bpe: &BpeModel,
    examples: &[LabeledExample],
    seed: u64,
    exec: Exec,
) -> Result<FeatureProvider> {
    match cfg.kind {
        ProviderKind::Random => Ok(FeatureProvider::random(bpe.vocab_size(), cfg.dim, seed)),
        ProviderKind::Masked => {
            let seqs: Vec<Vec<u32>> = examples
                .iter()
                .map(|e| bpe.encode(&pretokenize(&e.document.text())))
                .collect();
            let pre = PretrainConfig {
                seed,
                ..cfg.pretrain.clone()
            };
            Ok(FeatureProvider::Masked(MaskedEncoder::pretrain(&seqs, bpe.vocab_size(), &pre, exec)?))
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub report: TrainReport,
}

/// Trains a fresh model whose initialization is seeded by `train.seed`.
pub fn train_model(
    train_set: &[LabeledExample],
    valid: &[LabeledExample],
    bpe: BpeModel,
    provider: FeatureProvider,
    model_cfg: &ModelConfig,
    adam: &AdamConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let model = Seq2Seq::new(model_cfg.clone(), bpe.vocab_size(), provider.dim(), train_cfg.seed)?;
    let opt = Adam::new(adam.clone(), &model.params);
    continue_training(Checkpoint::new(model, opt, bpe, provider), train_set, valid, train_cfg)
}

/// Fine-tunes the parameters of `ck` with a fresh optimizer.
pub fn fine_tune(
    ck: &Checkpoint,
    train_set: &[LabeledExample],
    valid: &[LabeledExample],
    adam: &AdamConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let opt = Adam::new(adam.clone(), &ck.model.params);
    let start = Checkpoint::new(ck.model.clone(), opt, ck.bpe.clone(), ck.provider.clone());
    continue_training(start, train_set, valid, train_cfg)
}

fn continue_training(
    ck: Checkpoint,
    train_set: &[LabeledExample],
    valid: &[LabeledExample],
    train_cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let Checkpoint {
        mut model,
        mut optimizer,
        bpe,
        provider,
        ..
    } = ck;
    let exec = train_cfg.exec;
    let tr = encode_examples(train_set, &bpe, Some(&provider), &model, exec)?;
    let va = encode_examples(valid, &bpe, Some(&provider), &model, exec)?;
    let report = train(&mut model, &mut optimizer, &bpe, &tr, &va, train_cfg)?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(model, optimizer, bpe, provider),
        report,
    })
}

/// Generated triplets for each document.
pub fn predict(ck: &Checkpoint, docs: &[Document], decode: &DecodeConfig, exec: Exec) -> Result<Vec<Vec<DtiTriplet>>> {
    let wrapped: Vec<LabeledExample> = docs.iter().cloned().map(LabeledExample::unlabeled).collect();
    let enc = encode_examples(&wrapped, &ck.bpe, Some(&ck.provider), &ck.model, exec)?;
    predict_all(&ck.model, &ck.bpe, &enc, decode, exec)
}

pub fn attach(docs: &[Document], triplets: Vec<Vec<DtiTriplet>>) -> Vec<LabeledExample> {
    docs.iter().cloned().zip(triplets).map(|(d, t)| LabeledExample::new(d, t)).collect()
}

/// Scores predictions against gold, matching documents by id. Every gold
/// document must have a prediction; extra predictions are an error too.
pub fn evaluate_corpora(gold: &[LabeledExample], pred: &[LabeledExample], exec: Exec) -> Result<EvalReport> {
    let by_id: HashMap<&str, &LabeledExample> = pred.iter().map(|e| (e.document.id.as_str(), e)).collect();
    if by_id.len() != gold.len() || pred.len() != gold.len() {
        return Err(Error::LengthMismatch {
            what: "gold vs predicted documents",
            left: gold.len(),
            right: pred.len(),
        });
    }
    let mut ids = Vec::with_capacity(gold.len());
    let mut g = Vec::with_capacity(gold.len());
    let mut p = Vec::with_capacity(gold.len());
    for ex in gold {
        let id = ex.document.id.as_str();
        let hit = by_id
            .get(id)
            .ok_or_else(|| Error::Config(format!("no prediction for document `{id}`")))?;
        ids.push(id.to_string());
        g.push(ex.triplets.clone());
        p.push(hit.triplets.clone());
    }
    evaluate(&ids, &g, &p, exec)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemisupOutcome {
    pub method: PseudoMethod,
    pub pool_documents: usize,
    /// Documents surviving occurrence filtration (zero for distance supervision).
    pub rule_filtered: usize,
    pub pseudo_documents: usize,
    pub pseudo_triplets: usize,
    pub merged_examples: usize,
    pub report: EvalReport,
    pub control: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutcome {
    pub report: EvalReport,
    pub semisup: Option<SemisupOutcome>,
}

struct Stage<'a> {
    name: &'a str,
}

impl Stage<'_> {
    fn run<T>(&self, f: impl FnOnce() -> Result<T>) -> Result<T> {
        log::info!("stage {}", self.name);
        f().map_err(|e| e.in_stage(self.name))
    }
}

fn stage(name: &str) -> Stage<'_> {
    Stage { name }
}

/// Runs every stage and writes the artifacts under `out`:
///
/// ```text
/// config.json  corpus/{test,valid,train,pool}.jsonl  corpus/lexicons/
/// bpe.json  model.json  train_report.json  predictions.jsonl  report.json
/// semisup/{pseudo,merged}.jsonl  semisup/model.json  semisup/report.json
/// semisup/control_report.json  manifest.json
/// ```
///
/// `report.json` holds only the evaluation and is reproducible bit-for-bit
/// from the same configuration.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path, command: Vec<String>, exec: Exec) -> Result<PipelineOutcome> {
    let _lock = DirLock::acquire(out)?;
    let mut manifest = RunManifest::start(command, cfg.seed, cfg)?;
    write_json(cfg, &out.join("config.json"))?;
    let train_cfg = TrainConfig {
        seed: cfg.seed,
        exec,
        ..cfg.train.clone()
    };

    let source = stage("build-corpus").run(|| {
        if let CorpusSource::Files { raw, lexicons, pool } = &cfg.source {
            manifest.input(raw)?;
            manifest.input(lexicons)?;
            if let Some(p) = pool {
                manifest.input(p)?;
            }
        }
        load_source(&cfg.source)
    })?;
    let corpus_dir = out.join("corpus");
    let splits = stage("build-corpus").run(|| {
        let splits = build_corpus(&source.labeled, &source.lexicons, &cfg.corpus, cfg.seed, exec)?;
        mkdir(&corpus_dir)?;
        save_corpus(&splits.test, &corpus_dir.join("test.jsonl"))?;
        save_corpus(&splits.valid, &corpus_dir.join("valid.jsonl"))?;
        save_corpus(&splits.train, &corpus_dir.join("train.jsonl"))?;
        let pool: Vec<LabeledExample> = source.pool.iter().cloned().map(LabeledExample::unlabeled).collect();
        save_corpus(&pool, &corpus_dir.join("pool.jsonl"))?;
        source.lexicons.save_dir(&corpus_dir.join("lexicons"))?;
        Ok(splits)
    })?;

    let bpe = stage("train-bpe").run(|| {
        let bpe = train_tokenizer(&splits.train, cfg.bpe_merges, cfg.model.order)?;
        bpe.save(&out.join("bpe.json"))?;
        Ok(bpe)
    })?;

    let teacher = stage("train").run(|| {
        let provider = build_provider(&cfg.provider, &bpe, &splits.train, cfg.seed, exec)?;
        let t = train_model(
            &splits.train,
            &splits.valid,
            bpe.clone(),
            provider,
            &cfg.model,
            &cfg.optimizer,
            &train_cfg,
        )?;
        t.checkpoint.save(&out.join("model.json"))?;
        write_json(&t.report, &out.join("train_report.json"))?;
        Ok(t.checkpoint)
    })?;

    let test_docs: Vec<Document> = splits.test.iter().map(|e| e.document.clone()).collect();
    let pred = stage("generate").run(|| {
        let pred = attach(&test_docs, predict(&teacher, &test_docs, &cfg.train.decode, exec)?);
        save_corpus(&pred, &out.join("predictions.jsonl"))?;
        Ok(pred)
    })?;
    let report = stage("evaluate").run(|| {
        let report = evaluate_corpora(&splits.test, &pred, exec)?;
        write_json(&report, &out.join("report.json"))?;
        Ok(report)
    })?;

    let semisup = match &cfg.semisup {
        None => None,
        Some(s) => Some(stage("semisup").run(|| {
            run_semisup(s, &source, &splits, &teacher, &test_docs, &train_cfg, &out.join("semisup"), exec)
        })?),
    };

    manifest.output(out)?;
    manifest.finish(&out.join("manifest.json"))?;
    Ok(PipelineOutcome { report, semisup })
}

#[allow(clippy::too_many_arguments)]
fn run_semisup(
    s: &SemisupConfig,
    source: &SourceData,
    splits: &Splits,
    teacher: &Checkpoint,
    test_docs: &[Document],
    train_cfg: &TrainConfig,
    dir: &Path,
    exec: Exec,
) -> Result<SemisupOutcome> {
    mkdir(dir)?;
    let budget = EditBudget::default();
    let (pseudo, rule_filtered): (Vec<PseudoLabeledExample>, usize) = match s.method {
        PseudoMethod::Kd => {
            let d_semi = rule_filter(&source.pool, &source.lexicons, s.min_occurrence, &budget, exec)?;
            save_pseudo(&d_semi, &dir.join("d_semi.jsonl"))?;
            let docs: Vec<Document> = d_semi.iter().map(|e| e.document.clone()).collect();
            let generated = predict(teacher, &docs, &train_cfg.decode, exec)?;
            (kd_label(&generated, &d_semi)?, d_semi.len())
        }
        PseudoMethod::Ds | PseudoMethod::DsWithInteraction => {
            let with_i = s.method == PseudoMethod::DsWithInteraction;
            (ds_label(&splits.train, &source.pool, &source.lexicons, with_i, &budget, exec), 0)
        }
    };
    if pseudo.is_empty() {
        log::warn!("no pseudo-labeled documents survived; retraining on labeled data only");
    }
    save_pseudo(&pseudo, &dir.join("pseudo.jsonl"))?;
    let merged = merge_and_upsample(&splits.train, &pseudo, s.upsample, train_cfg.seed)?;
    save_corpus(&merged, &dir.join("merged.jsonl"))?;

    let ft_cfg = TrainConfig {
        max_steps: s.steps,
        ..train_cfg.clone()
    };
    let tuned = fine_tune(teacher, &merged, &splits.valid, &s.optimizer, &ft_cfg)?;
    tuned.checkpoint.save(&dir.join("model.json"))?;
    write_json(&tuned.report, &dir.join("train_report.json"))?;
    let pred = attach(test_docs, predict(&tuned.checkpoint, test_docs, &train_cfg.decode, exec)?);
    save_corpus(&pred, &dir.join("predictions.jsonl"))?;
    let report = evaluate_corpora(&splits.test, &pred, exec)?;
    write_json(&report, &dir.join("report.json"))?;

    let control = if s.control {
        let labeled_only = merge_and_upsample(&splits.train, &[], s.upsample, train_cfg.seed)?;
        let c = fine_tune(teacher, &labeled_only, &splits.valid, &s.optimizer, &ft_cfg)?;
        write_json(&c.report, &dir.join("control_train_report.json"))?;
        let pred = attach(test_docs, predict(&c.checkpoint, test_docs, &train_cfg.decode, exec)?);
        let r = evaluate_corpora(&splits.test, &pred, exec)?;
        write_json(&r, &dir.join("control_report.json"))?;
        Some(r)
    } else {
        None
    };

    Ok(SemisupOutcome {
        method: s.method,
        pool_documents: source.pool.len(),
        rule_filtered,
        pseudo_documents: pseudo.len(),
        pseudo_triplets: pseudo.iter().map(|e| e.pseudo_triplets.len()).sum(),
        merged_examples: merged.len(),
        report,
        control,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub order: TripletOrder,
    pub valid_f1: Option<f64>,
    pub test_f1: f64,
}

/// Trains one model per triplet order on the same corpus, tokenizer and
/// seed, appending each finished row to `out/ablation.json`. A failing run
/// stops the sweep; rows already written are kept.
pub fn ablate_orders(cfg: &PipelineConfig, out: &Path, command: Vec<String>, exec: Exec) -> Result<Vec<AblationRow>> {
    let _lock = DirLock::acquire(out)?;
    let mut manifest = RunManifest::start(command, cfg.seed, cfg)?;
    let train_cfg = TrainConfig {
        seed: cfg.seed,
        exec,
        ..cfg.train.clone()
    };
    let source = stage("build-corpus").run(|| load_source(&cfg.source))?;
    let splits =
        stage("build-corpus").run(|| build_corpus(&source.labeled, &source.lexicons, &cfg.corpus, cfg.seed, exec))?;
    let bpe = stage("train-bpe").run(|| train_tokenizer(&splits.train, cfg.bpe_merges, cfg.model.order))?;
    let provider = stage("train").run(|| build_provider(&cfg.provider, &bpe, &splits.train, cfg.seed, exec))?;
    let test_docs: Vec<Document> = splits.test.iter().map(|e| e.document.clone()).collect();

    let table = out.join("ablation.json");
    let mut rows = Vec::new();
    for order in TripletOrder::ALL {
        let name = format!("ablate-{order}");
        let row = stage(&name).run(|| {
            let model_cfg = ModelConfig {
                order,
                ..cfg.model.clone()
            };
            let t = train_model(
                &splits.train,
                &splits.valid,
                bpe.clone(),
                provider.clone(),
                &model_cfg,
                &cfg.optimizer,
                &train_cfg,
            )?;
            let pred = attach(&test_docs, predict(&t.checkpoint, &test_docs, &cfg.train.decode, exec)?);
            let report = evaluate_corpora(&splits.test, &pred, exec)?;
            Ok(AblationRow {
                order,
                valid_f1: t.report.best_f1,
                test_f1: report.triplet.f1,
            })
        })?;
        rows.push(row);
        write_json(&rows, &table)?;
    }
    manifest.output(&table)?;
    manifest.finish(&out.join("manifest.json"))?;
    Ok(rows)
}
