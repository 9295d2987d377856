use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{embed, embedding_table, EncoderLayer, FeatureAttention, Linear};
use super::optim::{Adam, AdamConfig};
use super::tape::{Gradients, ParamId, ParamStore, Tape};
use super::tensor::{sinusoid, Matrix};
use super::ModelConfig;
use crate::bpe::{PAD_ID, UNK_ID};
use crate::error::{Error, Result};
use crate::par::{self, Exec};

/// Frozen map from source ids to one feature row per token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureProvider {
    Random(RandomFeatures),
    Masked(MaskedEncoder),
}

impl FeatureProvider {
    pub fn random(vocab_size: usize, dim: usize, seed: u64) -> Self {
        FeatureProvider::Random(RandomFeatures::new(vocab_size, dim, seed))
    }

    pub fn dim(&self) -> usize {
        match self {
            FeatureProvider::Random(r) => r.table.cols,
            FeatureProvider::Masked(m) => m.config.dim,
        }
    }

    pub fn features(&self, ids: &[u32]) -> Result<Matrix> {
        match self {
            FeatureProvider::Random(r) => Ok(r.features(ids)),
            FeatureProvider::Masked(m) => m.hidden(ids),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FeatureProvider::Random(_) => "random",
            FeatureProvider::Masked(_) => "masked",
        }
    }
}

/// Random embedding table plus sinusoidal positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomFeatures {
    table: Matrix,
}

impl RandomFeatures {
    pub fn new(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
        RandomFeatures {
            table: Matrix::randn(vocab_size.max(UNK_ID as usize + 1), dim, 1.0, &mut rng),
        }
    }

    pub fn features(&self, ids: &[u32]) -> Matrix {
        let dim = self.table.cols;
        let mut out = sinusoid(ids.len(), dim);
        for (r, &id) in ids.iter().enumerate() {
            let id = if (id as usize) < self.table.rows { id } else { UNK_ID };
            for (o, t) in out.row_mut(r).iter_mut().zip(self.table.row(id as usize)) {
                *o += t;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub warmup: u64,
    pub mask_prob: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            dim: 32,
            heads: 2,
            ffn_dim: 64,
            steps: 300,
            batch: 8,
            lr: 2e-3,
            warmup: 50,
            mask_prob: 0.15,
            max_len: 512,
            seed: 0,
        }
    }
}

/// One-layer encoder trained to reconstruct masked tokens, then frozen.
/// Its final hidden states serve as features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedEncoder {
    config: ModelConfig,
    vocab_size: usize,
    params: ParamStore,
    embed: ParamId,
    pos: ParamId,
    layer: EncoderLayer,
    head: Linear,
}

impl MaskedEncoder {
    fn init(vocab_size: usize, cfg: &PretrainConfig) -> Result<Self> {
        let config = ModelConfig {
            layers: 1,
            dim: cfg.dim,
            heads: cfg.heads,
            ffn_dim: cfg.ffn_dim,
            dropout: 0.1,
            attn_dropout: 0.0,
            label_smoothing: 0.0,
            fusion: false,
            max_source_len: cfg.max_len,
            max_target_len: 1,
            ..ModelConfig::default()
        };
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut ps = ParamStore::default();
        let embed = embedding_table(&mut ps, "mlm.embed", vocab_size, cfg.dim, &mut rng);
        let pos = ps.add("mlm.pos", sinusoid(cfg.max_len, cfg.dim));
        let layer = EncoderLayer::new(&mut ps, "mlm.enc", &config, &mut rng);
        let head = Linear::new(&mut ps, "mlm.head", cfg.dim, vocab_size, &mut rng);
        Ok(MaskedEncoder {
            config,
            vocab_size,
            params: ps,
            embed,
            pos,
            layer,
            head,
        })
    }

    fn forward(&self, t: &mut Tape, ids: &[u32]) -> Result<usize> {
        if ids.is_empty() || ids.len() > self.config.max_source_len {
            return Err(Error::TooLong {
                len: ids.len(),
                max: self.config.max_source_len,
            });
        }
        let ids: Vec<u32> = ids
            .iter()
            .map(|&i| if (i as usize) < self.vocab_size { i } else { UNK_ID })
            .collect();
        let mut h = embed(t, self.embed, self.pos, &ids, self.config.dim);
        h = t.dropout(h, self.config.dropout);
        self.layer.forward(t, &self.config, h, None, FeatureAttention::Independent)
    }

    pub fn hidden(&self, ids: &[u32]) -> Result<Matrix> {
        let mut t = Tape::new(&self.params);
        let h = self.forward(&mut t, ids)?;
        Ok(t.value(h).clone())
    }

    /// Trains on `sequences` by masked-token reconstruction.
    pub fn pretrain(sequences: &[Vec<u32>], vocab_size: usize, cfg: &PretrainConfig, exec: Exec) -> Result<Self> {
        let pool: Vec<&[u32]> = sequences
            .iter()
            .filter(|s| !s.is_empty())
            .map(|s| &s[..s.len().min(cfg.max_len)])
            .collect();
        if pool.is_empty() {
            return Err(Error::Config("no sequences to pretrain the feature encoder on".into()));
        }
        if !(0.0..1.0).contains(&cfg.mask_prob) || cfg.batch == 0 {
            return Err(Error::Config("mask_prob must lie in [0, 1) and batch must be positive".into()));
        }
        let mut model = MaskedEncoder::init(vocab_size, cfg)?;
        let mut opt = Adam::new(
            AdamConfig {
                lr: cfg.lr,
                warmup: cfg.warmup,
                clip_norm: Some(1.0),
                ..AdamConfig::default()
            },
            &model.params,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
        for step in 0..cfg.steps {
            let jobs: Vec<(Vec<u32>, Vec<u32>, u64)> = (0..cfg.batch)
                .map(|j| {
                    let seq = pool[rng.gen_range(0..pool.len())];
                    let mut input = seq.to_vec();
                    let mut gold = vec![PAD_ID; seq.len()];
                    for (k, tok) in input.iter_mut().enumerate() {
                        if rng.gen::<f64>() < cfg.mask_prob {
                            gold[k] = *tok;
                            *tok = UNK_ID;
                        }
                    }
                    if gold.iter().all(|&g| g == PAD_ID) {
                        let k = rng.gen_range(0..seq.len());
                        gold[k] = seq[k];
                        input[k] = UNK_ID;
                    }
                    (input, gold, step * cfg.batch as u64 + j as u64)
                })
                .collect();
            let results = par::try_map(exec, &jobs, |(input, gold, s)| -> Result<(f64, usize, Gradients)> {
                let mut t = Tape::training(&model.params, ChaCha8Rng::seed_from_u64(cfg.seed ^ s.wrapping_mul(0x9e37_79b9)));
                let h = model.forward(&mut t, input)?;
                let logits = model.head.apply(&mut t, h);
                let loss = t.smoothed_nll(logits, gold, 0.0);
                let n = gold.iter().filter(|&&g| g != PAD_ID).count();
                Ok((t.value(loss).data[0], n, t.backward(loss)))
            })?;
            let mut grads = Gradients::empty(model.params.len());
            let mut total = 0.0;
            let mut count = 0;
            for (l, n, g) in results {
                total += l;
                count += n;
                grads.accumulate(g);
            }
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: "feature encoder pretraining".into(),
                });
            }
            grads.scale(1.0 / count as f64);
            opt.update(&mut model.params, &grads);
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_provider_is_deterministic() {
        let p = FeatureProvider::random(20, 6, 3);
        let a = p.features(&[4, 5, 6]).unwrap();
        assert_eq!(a, FeatureProvider::random(20, 6, 3).features(&[4, 5, 6]).unwrap());
        assert_eq!(a.shape(), (3, 6));
        // out-of-table ids fall back to the unknown row
        let b = p.features(&[99]).unwrap();
        assert_eq!(b, p.features(&[UNK_ID]).unwrap());
    }

    #[test]
    fn masked_encoder_pretrains() {
        let seqs: Vec<Vec<u32>> = (0..10).map(|i| vec![4 + i % 3, 7, 8, 9, 4 + (i + 1) % 3]).collect();
        let cfg = PretrainConfig {
            dim: 8,
            ffn_dim: 16,
            steps: 20,
            batch: 4,
            max_len: 16,
            ..PretrainConfig::default()
        };
        let p = MaskedEncoder::pretrain(&seqs, 12, &cfg, Exec::Sequential).unwrap();
        let again = MaskedEncoder::pretrain(&seqs, 12, &cfg, Exec::Parallel).unwrap();
        assert_eq!(p, again);
        let f = FeatureProvider::Masked(p);
        assert_eq!(f.features(&[4, 7, 8]).unwrap().shape(), (3, 8));
        assert!(f.features(&[4; 17]).is_err());
    }
}
