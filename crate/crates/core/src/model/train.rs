use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::decode::{generate, DecodeConfig};
use super::network::Seq2Seq;
use super::optim::Adam;
use super::provider::FeatureProvider;
use super::tape::{Gradients, Tape};
use super::tensor::Matrix;
use crate::bpe::{pretokenize, BpeModel, EOS_ID, SOS_ID};
use crate::corpus::{DtiTriplet, LabeledExample};
use crate::error::{Error, Result};
use crate::linearize::serialize_gold;
use crate::metrics::triplet_prf;
use crate::par::{self, Exec};

/// A training or evaluation example in model space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedExample {
    pub id: String,
    pub src: Vec<u32>,
    /// Target ids without start or end markers.
    pub tgt: Vec<u32>,
    /// Frozen provider output for `src`; absent when fusion is off.
    pub features: Option<Matrix>,
    pub gold: Vec<DtiTriplet>,
}

impl EncodedExample {
    pub fn tokens(&self) -> usize {
        self.src.len() + self.tgt.len() + 1
    }
}

/// Tokenizes examples, truncating sources and targets to the model limits,
/// and attaches provider features when `provider` is given.
pub fn encode_examples(
    examples: &[LabeledExample],
    bpe: &BpeModel,
    provider: Option<&FeatureProvider>,
    model: &Seq2Seq,
    exec: Exec,
) -> Result<Vec<EncodedExample>> {
    let cfg = &model.config;
    par::try_map(exec, examples, |ex| {
        let mut src = bpe.encode(&pretokenize(&ex.document.text()));
        src.truncate(cfg.max_source_len);
        if src.is_empty() {
            return Err(Error::EmptyField("document text"));
        }
        let mut tgt = bpe.encode(&serialize_gold(&ex.triplets, cfg.order)?);
        if tgt.len() + 1 > cfg.max_target_len {
            log::warn!(
                "target of {} has {} tokens, truncated to {}",
                ex.document.id,
                tgt.len(),
                cfg.max_target_len - 1
            );
            tgt.truncate(cfg.max_target_len - 1);
        }
        let features = match provider {
            Some(p) if cfg.fusion => Some(p.features(&src)?),
            _ => None,
        };
        Ok(EncodedExample {
            id: ex.document.id.clone(),
            src,
            tgt,
            features,
            gold: ex.triplets.clone(),
        })
    })
}

/// Groups examples (visited in `order`) into consecutive batches whose token
/// count stays within `budget`; an oversized example forms its own batch.
pub fn batches_by_tokens(order: &[usize], examples: &[EncodedExample], budget: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut used = 0;
    for &i in order {
        let n = examples[i].tokens();
        if !cur.is_empty() && used + n > budget {
            out.push(std::mem::take(&mut cur));
            used = 0;
        }
        cur.push(i);
        used += n;
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Summed loss, target token count and gradients of one example.
/// Dropout is active when `rng` is given.
pub fn example_gradients(model: &Seq2Seq, ex: &EncodedExample, rng: Option<ChaCha8Rng>) -> Result<(f64, usize, Gradients)> {
    let mut t = match rng {
        Some(r) => Tape::training(&model.params, r),
        None => Tape::new(&model.params),
    };
    let (r, b) = model.encode_on(&mut t, &ex.src, ex.features.as_ref())?;
    let mut prefix = Vec::with_capacity(ex.tgt.len() + 1);
    prefix.push(SOS_ID);
    prefix.extend_from_slice(&ex.tgt);
    let mut gold = ex.tgt.clone();
    gold.push(EOS_ID);
    let logits = model.decode_on(&mut t, &prefix, r, b)?;
    let loss = t.smoothed_nll(logits, &gold, model.config.label_smoothing);
    let value = t.value(loss).data[0];
    Ok((value, gold.len(), t.backward(loss)))
}

fn mix(seed: u64, step: u64, index: u64) -> u64 {
    let mut z = seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One optimizer step over `batch`; returns the mean per-token loss.
///
/// Per-example gradients may be computed in parallel; they are summed in
/// batch order, so the result does not depend on `exec`.
pub fn train_step(
    model: &mut Seq2Seq,
    opt: &mut Adam,
    batch: &[&EncodedExample],
    token_budget: usize,
    seed: u64,
    exec: Exec,
) -> Result<f64> {
    let tokens: usize = batch.iter().map(|e| e.tokens()).sum();
    if batch.len() > 1 && tokens > token_budget {
        return Err(Error::Config(format!(
            "batch holds {tokens} tokens, over the budget of {token_budget}"
        )));
    }
    let step = opt.step + 1;
    let jobs: Vec<(usize, &EncodedExample)> = batch.iter().copied().enumerate().collect();
    let m: &Seq2Seq = model;
    let results = par::try_map(exec, &jobs, |&(i, ex)| {
        example_gradients(m, ex, Some(ChaCha8Rng::seed_from_u64(mix(seed, step, i as u64))))
    })?;
    let mut grads = Gradients::empty(model.params.len());
    let (mut total, mut count) = (0.0, 0usize);
    for (loss, n, g) in results {
        total += loss;
        count += n;
        grads.accumulate(g);
    }
    let mean = total / count.max(1) as f64;
    if !mean.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            detail: format!(
                "{} examples, {count} target tokens, lr {:.3e}",
                batch.len(),
                opt.current_lr()
            ),
        });
    }
    grads.scale(1.0 / count.max(1) as f64);
    opt.update(&mut model.params, &grads);
    if !model.params.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            detail: "parameters became non-finite after the update".into(),
        });
    }
    Ok(mean)
}

/// Generated triplets for every example.
pub fn predict_all(
    model: &Seq2Seq,
    bpe: &BpeModel,
    examples: &[EncodedExample],
    decode: &DecodeConfig,
    exec: Exec,
) -> Result<Vec<Vec<DtiTriplet>>> {
    par::try_map(exec, examples, |ex| generate(model, bpe, &ex.src, ex.features.as_ref(), decode))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub max_steps: u64,
    pub token_budget: usize,
    /// Validate every this many steps.
    pub eval_every: u64,
    /// Stop after this many evaluations without improvement.
    pub patience: usize,
    /// Stop as soon as validation triplet F1 reaches this.
    pub target_f1: Option<f64>,
    pub decode: DecodeConfig,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            max_steps: 2000,
            token_budget: 1200,
            eval_every: 100,
            patience: 5,
            target_f1: None,
            decode: DecodeConfig::default(),
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    Patience,
    TargetReached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: u64,
    pub losses: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    pub best_step: Option<u64>,
    pub best_f1: Option<f64>,
    pub stop: StopReason,
}

/// Trains until `max_steps`, early stopping or the target F1. When `valid`
/// is non-empty the parameters with the best validation triplet F1 are
/// restored at the end.
pub fn train(
    model: &mut Seq2Seq,
    opt: &mut Adam,
    bpe: &BpeModel,
    train_set: &[EncodedExample],
    valid: &[EncodedExample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = TrainReport {
        steps: 0,
        losses: Vec::new(),
        evals: Vec::new(),
        best_step: None,
        best_f1: None,
        stop: StopReason::MaxSteps,
    };
    let mut best_params = None;
    let mut stale = 0usize;
    let gold: Vec<Vec<DtiTriplet>> = valid.iter().map(|e| e.gold.clone()).collect();

    let mut evaluate = |model: &Seq2Seq, step: u64, report: &mut TrainReport| -> Result<Option<StopReason>> {
        let pred = predict_all(model, bpe, valid, &cfg.decode, cfg.exec)?;
        let f1 = triplet_prf(&gold, &pred)?.f1;
        log::info!("step {step}: validation triplet F1 {f1:.4}");
        report.evals.push(EvalPoint { step, f1 });
        if report.best_f1.is_none_or(|b| f1 > b) {
            report.best_f1 = Some(f1);
            report.best_step = Some(step);
            best_params = Some(model.params.clone());
            stale = 0;
        } else {
            stale += 1;
        }
        if cfg.target_f1.is_some_and(|t| f1 >= t) {
            return Ok(Some(StopReason::TargetReached));
        }
        if stale >= cfg.patience {
            return Ok(Some(StopReason::Patience));
        }
        Ok(None)
    };

    'outer: while report.steps < cfg.max_steps {
        order.shuffle(&mut rng);
        for batch in batches_by_tokens(&order, train_set, cfg.token_budget) {
            let refs: Vec<&EncodedExample> = batch.iter().map(|&i| &train_set[i]).collect();
            let loss = train_step(model, opt, &refs, cfg.token_budget, cfg.seed, cfg.exec)?;
            report.losses.push(loss);
            report.steps += 1;
            if !valid.is_empty() && cfg.eval_every > 0 && report.steps.is_multiple_of(cfg.eval_every) {
                if let Some(stop) = evaluate(model, report.steps, &mut report)? {
                    report.stop = stop;
                    break 'outer;
                }
            }
            if report.steps >= cfg.max_steps {
                break 'outer;
            }
        }
    }
    if !valid.is_empty() && report.evals.last().map(|e| e.step) != Some(report.steps) {
        if let Some(stop) = evaluate(model, report.steps, &mut report)? {
            if report.stop == StopReason::MaxSteps && stop == StopReason::TargetReached {
                report.stop = stop;
            }
        }
    }
    if let Some(p) = best_params {
        model.params = p;
    }
    Ok(report)
}
