use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::network::{Memory, Seq2Seq, StepCache};
use super::tape::{log_softmax_rows, Tape};
use super::tensor::Matrix;
use crate::bpe::{BpeModel, EOS_ID, SOS_ID};
use crate::corpus::DtiTriplet;
use crate::error::{Error, Result};
use crate::linearize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    /// 1 means greedy.
    pub beam: usize,
    pub max_len: usize,
    pub eos: u32,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 1,
            max_len: 128,
            eos: EOS_ID,
        }
    }
}

/// An encoded source ready for repeated decoder calls.
struct Session<'a> {
    model: &'a Seq2Seq,
    tape: Tape<'a>,
    memory: Memory,
    mark: usize,
}

impl<'a> Session<'a> {
    fn new(model: &'a Seq2Seq, src: &[u32], features: Option<&Matrix>) -> Result<Self> {
        let mut tape = Tape::new(&model.params);
        let (r, b) = model.encode_on(&mut tape, src, features)?;
        let memory = model.memory_on(&mut tape, r, b);
        let mark = tape.len();
        Ok(Session {
            model,
            tape,
            memory,
            mark,
        })
    }

    /// Feeds `token` after the positions in `cache`; returns the
    /// log-probabilities of the token that follows it.
    fn next(&mut self, token: u32, cache: &mut StepCache) -> Result<Vec<f64>> {
        self.tape.truncate(self.mark);
        let logits = self.model.step_on(&mut self.tape, token, cache, &self.memory)?;
        Ok(log_softmax_rows(self.tape.value(logits)).data)
    }

    fn max_len(&self, cfg: &DecodeConfig) -> usize {
        cfg.max_len.min(self.model.config.max_target_len - 1)
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Most probable token at every step until end-of-sequence or `max_len`.
/// The result excludes the start and end markers.
pub fn greedy(model: &Seq2Seq, src: &[u32], features: Option<&Matrix>, cfg: &DecodeConfig) -> Result<Vec<u32>> {
    let mut s = Session::new(model, src, features)?;
    let max_len = s.max_len(cfg);
    let mut cache = model.step_cache();
    let mut out = Vec::new();
    let mut lp = s.next(SOS_ID, &mut cache)?;
    while out.len() < max_len {
        let tok = argmax(&lp) as u32;
        if tok == cfg.eos {
            break;
        }
        out.push(tok);
        if out.len() < max_len {
            lp = s.next(tok, &mut cache)?;
        }
    }
    Ok(out)
}

#[derive(Clone)]
struct Hyp {
    tokens: Vec<u32>,
    score: f64,
}

fn by_score(a: &Hyp, b: &Hyp) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

struct Live {
    hyp: Hyp,
    cache: StepCache,
    next: Vec<f64>,
}

/// Beam search over summed log-probabilities. Ties prefer the
/// lexicographically smaller token sequence, so width 1 is greedy.
pub fn beam_search(model: &Seq2Seq, src: &[u32], features: Option<&Matrix>, cfg: &DecodeConfig) -> Result<Vec<u32>> {
    if cfg.beam == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let mut s = Session::new(model, src, features)?;
    let max_len = s.max_len(cfg);
    let mut cache = model.step_cache();
    let next = s.next(SOS_ID, &mut cache)?;
    let mut live = vec![Live {
        hyp: Hyp {
            tokens: vec![SOS_ID],
            score: 0.0,
        },
        cache,
        next,
    }];
    let mut done: Vec<Hyp> = Vec::new();
    while !live.is_empty() && done.len() < cfg.beam {
        if live[0].hyp.tokens.len() > max_len {
            break;
        }
        let mut cands: Vec<(usize, Hyp)> = Vec::new();
        for (i, l) in live.iter().enumerate() {
            let lp = &l.next;
            let mut order: Vec<usize> = (0..lp.len()).collect();
            order.sort_by(|&a, &b| lp[b].partial_cmp(&lp[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
            for &tok in order.iter().take(cfg.beam) {
                let mut tokens = l.hyp.tokens.clone();
                tokens.push(tok as u32);
                cands.push((
                    i,
                    Hyp {
                        tokens,
                        score: l.hyp.score + lp[tok],
                    },
                ));
            }
        }
        cands.sort_by(|a, b| by_score(&a.1, &b.1));
        cands.truncate(cfg.beam - done.len());
        let mut survivors = Vec::new();
        for (parent, c) in cands {
            let tok = *c.tokens.last().unwrap();
            if tok == cfg.eos {
                done.push(c);
            } else if c.tokens.len() > max_len {
                // no further step is needed for a hypothesis at the length limit
                survivors.push(Live {
                    hyp: c,
                    cache: model.step_cache(),
                    next: Vec::new(),
                });
            } else {
                let mut cache = live[parent].cache.clone();
                let next = s.next(tok, &mut cache)?;
                survivors.push(Live { hyp: c, cache, next });
            }
        }
        live = survivors;
    }
    let pool: Vec<Hyp> = if done.is_empty() {
        live.into_iter().map(|l| l.hyp).collect()
    } else {
        done
    };
    let mut best = pool.into_iter().min_by(by_score).unwrap_or(Hyp {
        tokens: vec![SOS_ID],
        score: 0.0,
    });
    best.tokens.remove(0);
    if best.tokens.last() == Some(&cfg.eos) {
        best.tokens.pop();
    }
    Ok(best.tokens)
}

pub fn generate_ids(model: &Seq2Seq, src: &[u32], features: Option<&Matrix>, cfg: &DecodeConfig) -> Result<Vec<u32>> {
    if cfg.beam <= 1 {
        greedy(model, src, features, cfg)
    } else {
        beam_search(model, src, features, cfg)
    }
}

/// Decodes a source and parses the output into triplets.
pub fn generate(
    model: &Seq2Seq,
    bpe: &BpeModel,
    src: &[u32],
    features: Option<&Matrix>,
    cfg: &DecodeConfig,
) -> Result<Vec<DtiTriplet>> {
    let ids = generate_ids(model, src, features, cfg)?;
    let text = bpe.decode_skip_special(&ids)?;
    Ok(linearize::parse(&text, model.config.order))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;

    fn model() -> Seq2Seq {
        let cfg = ModelConfig {
            layers: 1,
            dim: 16,
            heads: 2,
            ffn_dim: 32,
            max_source_len: 32,
            max_target_len: 12,
            ..ModelConfig::default()
        };
        Seq2Seq::new(cfg, 10, 4, 11).unwrap()
    }

    #[test]
    fn beam_one_is_greedy() {
        let m = model();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for len in 1..6 {
            let src: Vec<u32> = (0..len).map(|i| 4 + (i as u32 * 3) % 6).collect();
            let f = Matrix::randn(len, 4, 1.0, &mut rng);
            let cfg = DecodeConfig::default();
            let g = greedy(&m, &src, Some(&f), &cfg).unwrap();
            let b = beam_search(&m, &src, Some(&f), &cfg).unwrap();
            assert_eq!(g, b);
            assert!(g.len() <= 11);
            let wide = beam_search(&m, &src, Some(&f), &DecodeConfig { beam: 3, ..cfg }).unwrap();
            assert!(wide.len() <= 11);
        }
    }

    #[test]
    fn stepping_matches_full_decoder() {
        let m = model();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let src = [4, 7, 5, 9];
        let f = Matrix::randn(4, 4, 1.0, &mut rng);
        let prefix = [SOS_ID, 6, 8, 4, 4, 9];
        let r = m.encode(&src, Some(&f)).unwrap();
        let full = m.decode_forward(&prefix, &r, Some(&f)).unwrap();
        let mut s = Session::new(&m, &src, Some(&f)).unwrap();
        let mut cache = m.step_cache();
        for (i, &tok) in prefix.iter().enumerate() {
            let lp = s.next(tok, &mut cache).unwrap();
            assert_eq!(cache.len(), i + 1);
            for (a, b) in lp.iter().zip(full.row(i)) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn untrained_output_parses() {
        let m = model();
        let bpe = crate::bpe::train_bpe(&["a b c"], 0, &crate::bpe::default_reserved()).unwrap();
        let f = Matrix::filled(2, 4, 0.5);
        // whatever an untrained model emits, parsing never fails
        let ts = generate(&m, &bpe, &[4, 5], Some(&f), &DecodeConfig::default()).unwrap();
        assert!(ts.iter().all(|t| t.validate().is_ok()));
    }
}
