use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{log_softmax_rows, NodeId, ParamId, ParamStore, Tape};
use super::tensor::{sinusoid, Matrix};
use super::ModelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub(crate) fn new(ps: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        Linear {
            w: ps.add(format!("{name}.w"), Matrix::randn(fan_in, fan_out, std, rng)),
            b: ps.add(format!("{name}.b"), Matrix::zeros(1, fan_out)),
        }
    }

    pub(crate) fn apply(&self, t: &mut Tape, x: NodeId) -> NodeId {
        let w = t.param(self.w);
        let y = t.matmul(x, w);
        let b = t.param(self.b);
        t.add_row(y, b)
    }
}

/// Multi-head attention with its own query/key/value/output projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Attention {
    fn new(ps: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Attention {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(ps, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(ps, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(ps, &format!("{name}.o"), dim, dim, rng),
        }
    }

    /// Attends from `query` rows over `memory` rows.
    pub fn apply(&self, t: &mut Tape, query: NodeId, memory: NodeId, cfg: &ModelConfig, causal: bool) -> NodeId {
        let q = self.q.apply(t, query);
        let (k, v) = self.keys_values(t, memory);
        self.attend_projected(t, q, k, v, cfg, causal)
    }

    pub(crate) fn keys_values(&self, t: &mut Tape, memory: NodeId) -> (NodeId, NodeId) {
        (self.k.apply(t, memory), self.v.apply(t, memory))
    }

    /// Attention of already projected queries, keys and values, followed
    /// by the output projection.
    pub(crate) fn attend_projected(
        &self,
        t: &mut Tape,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        cfg: &ModelConfig,
        causal: bool,
    ) -> NodeId {
        let a = t.attention(q, k, v, cfg.heads, causal, cfg.attn_dropout);
        self.o.apply(t, a)
    }
}

/// Projected keys and values of `R` (and of the features) for every
/// decoder layer.
pub(crate) struct Memory {
    layers: Vec<LayerMemory>,
}

struct LayerMemory {
    r: (NodeId, NodeId),
    b: Option<(NodeId, NodeId)>,
}

/// Self-attention keys and values of the positions decoded so far.
#[derive(Debug, Clone)]
pub(crate) struct StepCache {
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
    len: usize,
}

#[cfg(test)]
impl StepCache {
    pub(crate) fn len(&self) -> usize {
        self.len
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct Norm {
    g: ParamId,
    b: ParamId,
}

impl Norm {
    fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Self {
        Norm {
            g: ps.add(format!("{name}.g"), Matrix::filled(1, dim, 1.0)),
            b: ps.add(format!("{name}.b"), Matrix::zeros(1, dim)),
        }
    }

    fn apply(&self, t: &mut Tape, x: NodeId) -> NodeId {
        let (g, b) = (t.param(self.g), t.param(self.b));
        t.layer_norm(x, g, b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct Ffn {
    up: Linear,
    down: Linear,
}

impl Ffn {
    fn new(ps: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Ffn {
            up: Linear::new(ps, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(ps, &format!("{name}.down"), hidden, dim, rng),
        }
    }

    fn apply(&self, t: &mut Tape, x: NodeId) -> NodeId {
        let h = self.up.apply(t, x);
        let h = t.relu(h);
        self.down.apply(t, h)
    }
}

/// Which projections the attention over the feature matrix uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureAttention {
    /// The layer's own, separately trained feature attention.
    Independent,
    /// Reuse the self-attention projections; only meaningful for testing.
    SharedWithSelf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer {
    self_attn: Attention,
    feat_attn: Option<Attention>,
    ln_attn: Norm,
    ffn: Ffn,
    ln_ffn: Norm,
}

impl EncoderLayer {
    pub(crate) fn new(ps: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        EncoderLayer {
            self_attn: Attention::new(ps, &format!("{name}.self"), cfg.dim, rng),
            feat_attn: cfg
                .fusion
                .then(|| Attention::new(ps, &format!("{name}.feat"), cfg.dim, rng)),
            ln_attn: Norm::new(ps, &format!("{name}.ln_attn"), cfg.dim),
            ffn: Ffn::new(ps, &format!("{name}.ffn"), cfg.dim, cfg.ffn_dim, rng),
            ln_ffn: Norm::new(ps, &format!("{name}.ln_ffn"), cfg.dim),
        }
    }

    /// The attention sub-block: plain self-attention, or the average of
    /// self-attention and attention over `features` when those are given.
    pub fn attend(
        &self,
        t: &mut Tape,
        cfg: &ModelConfig,
        h: NodeId,
        features: Option<NodeId>,
        mode: FeatureAttention,
    ) -> Result<NodeId> {
        let own = self.self_attn.apply(t, h, h, cfg, false);
        let Some(b) = features else { return Ok(own) };
        let attn = match mode {
            FeatureAttention::Independent => self
                .feat_attn
                .as_ref()
                .ok_or_else(|| Error::Config("layer was built without feature attention".into()))?,
            FeatureAttention::SharedWithSelf => &self.self_attn,
        };
        let other = attn.apply(t, h, b, cfg, false);
        let sum = t.add(own, other);
        Ok(t.scale(sum, 0.5))
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        cfg: &ModelConfig,
        h: NodeId,
        features: Option<NodeId>,
        mode: FeatureAttention,
    ) -> Result<NodeId> {
        let a = self.attend(t, cfg, h, features, mode)?;
        let a = t.dropout(a, cfg.dropout);
        let x = t.add(h, a);
        let x = self.ln_attn.apply(t, x);
        let f = self.ffn.apply(t, x);
        let f = t.dropout(f, cfg.dropout);
        let y = t.add(x, f);
        Ok(self.ln_ffn.apply(t, y))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct DecoderLayer {
    self_attn: Attention,
    ln_self: Norm,
    cross_attn: Attention,
    feat_attn: Option<Attention>,
    ln_cross: Norm,
    ffn: Ffn,
    ln_ffn: Norm,
}

impl DecoderLayer {
    fn new(ps: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        DecoderLayer {
            self_attn: Attention::new(ps, &format!("{name}.self"), cfg.dim, rng),
            ln_self: Norm::new(ps, &format!("{name}.ln_self"), cfg.dim),
            cross_attn: Attention::new(ps, &format!("{name}.cross"), cfg.dim, rng),
            feat_attn: cfg
                .fusion
                .then(|| Attention::new(ps, &format!("{name}.feat"), cfg.dim, rng)),
            ln_cross: Norm::new(ps, &format!("{name}.ln_cross"), cfg.dim),
            ffn: Ffn::new(ps, &format!("{name}.ffn"), cfg.dim, cfg.ffn_dim, rng),
            ln_ffn: Norm::new(ps, &format!("{name}.ln_ffn"), cfg.dim),
        }
    }

    fn memory(&self, t: &mut Tape, r: NodeId, features: Option<NodeId>) -> LayerMemory {
        LayerMemory {
            r: self.cross_attn.keys_values(t, r),
            b: match (features, &self.feat_attn) {
                (Some(b), Some(attn)) => Some(attn.keys_values(t, b)),
                _ => None,
            },
        }
    }

    /// Everything after the self-attention sub-block.
    fn rest(&self, t: &mut Tape, cfg: &ModelConfig, h: NodeId, s: NodeId, mem: &LayerMemory) -> NodeId {
        let s = t.dropout(s, cfg.dropout);
        let x = t.add(h, s);
        let x = self.ln_self.apply(t, x);

        let q = self.cross_attn.q.apply(t, x);
        let mut c = self.cross_attn.attend_projected(t, q, mem.r.0, mem.r.1, cfg, false);
        if let (Some((k, v)), Some(attn)) = (mem.b, &self.feat_attn) {
            let q = attn.q.apply(t, x);
            let f = attn.attend_projected(t, q, k, v, cfg, false);
            let sum = t.add(c, f);
            c = t.scale(sum, 0.5);
        }
        let c = t.dropout(c, cfg.dropout);
        let y = t.add(x, c);
        let y = self.ln_cross.apply(t, y);

        let f = self.ffn.apply(t, y);
        let f = t.dropout(f, cfg.dropout);
        let z = t.add(y, f);
        self.ln_ffn.apply(t, z)
    }

    fn forward(&self, t: &mut Tape, cfg: &ModelConfig, h: NodeId, mem: &LayerMemory) -> NodeId {
        let s = self.self_attn.apply(t, h, h, cfg, true);
        self.rest(t, cfg, h, s, mem)
    }

    /// One new position `h` (a single row); its keys and values join `keys`/`values`.
    fn step(
        &self,
        t: &mut Tape,
        cfg: &ModelConfig,
        h: NodeId,
        keys: &mut Matrix,
        values: &mut Matrix,
        mem: &LayerMemory,
    ) -> NodeId {
        let q = self.self_attn.q.apply(t, h);
        let (k, v) = self.self_attn.keys_values(t, h);
        keys.push_row(t.value(k).row(0));
        values.push_row(t.value(v).row(0));
        let kn = t.input(keys.clone());
        let vn = t.input(values.clone());
        let s = self.self_attn.attend_projected(t, q, kn, vn, cfg, false);
        self.rest(t, cfg, h, s, mem)
    }
}

/// Parameters and layout of the encoder-decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seq2Seq {
    pub config: ModelConfig,
    pub vocab_size: usize,
    /// Width of the provider's feature rows.
    pub feature_dim: usize,
    pub params: ParamStore,
    src_embed: ParamId,
    tgt_embed: ParamId,
    src_pos: ParamId,
    tgt_pos: ParamId,
    adapter: Option<Linear>,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    out: Linear,
}

pub(crate) fn embedding_table(ps: &mut ParamStore, name: &str, rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> ParamId {
    ps.add(name, Matrix::randn(rows, dim, (dim as f64).powf(-0.5), rng))
}

/// Token embeddings scaled by √dim plus positions.
pub(crate) fn embed(t: &mut Tape, table: ParamId, pos: ParamId, ids: &[u32], dim: usize) -> NodeId {
    let tab = t.param(table);
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let x = t.gather(tab, &idx);
    let x = t.scale(x, (dim as f64).sqrt());
    let pt = t.param(pos);
    let positions: Vec<usize> = (0..ids.len()).collect();
    let p = t.gather(pt, &positions);
    t.add(x, p)
}

impl Seq2Seq {
    pub fn new(config: ModelConfig, vocab_size: usize, feature_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 || feature_dim == 0 {
            return Err(Error::Config("vocabulary and feature widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::default();
        let d = config.dim;
        let src_embed = embedding_table(&mut ps, "src_embed", vocab_size, d, &mut rng);
        let tgt_embed = embedding_table(&mut ps, "tgt_embed", vocab_size, d, &mut rng);
        let src_pos = ps.add("src_pos", sinusoid(config.max_source_len, d));
        let tgt_pos = ps.add("tgt_pos", sinusoid(config.max_target_len, d));
        let adapter = config
            .fusion
            .then(|| Linear::new(&mut ps, "adapter", feature_dim, d, &mut rng));
        let encoder = (0..config.layers)
            .map(|l| EncoderLayer::new(&mut ps, &format!("enc{l}"), &config, &mut rng))
            .collect();
        let decoder = (0..config.layers)
            .map(|l| DecoderLayer::new(&mut ps, &format!("dec{l}"), &config, &mut rng))
            .collect();
        let out = Linear::new(&mut ps, "out", d, vocab_size, &mut rng);
        Ok(Seq2Seq {
            config,
            vocab_size,
            feature_dim,
            params: ps,
            src_embed,
            tgt_embed,
            src_pos,
            tgt_pos,
            adapter,
            encoder,
            decoder,
            out,
        })
    }

    pub fn encoder_layers(&self) -> &[EncoderLayer] {
        &self.encoder
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&i| i as usize >= self.vocab_size) {
            Some(&id) => Err(Error::TokenOutOfRange {
                id: id as usize,
                size: self.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Validates a source and its features.
    pub fn check_source(&self, src: &[u32], features: Option<&Matrix>) -> Result<()> {
        if src.is_empty() {
            return Err(Error::Shape("source sequence is empty".into()));
        }
        if src.len() > self.config.max_source_len {
            return Err(Error::TooLong {
                len: src.len(),
                max: self.config.max_source_len,
            });
        }
        self.check_ids(src)?;
        if self.config.fusion {
            let b = features.ok_or_else(|| Error::Shape("fusion is on but no feature matrix was given".into()))?;
            if b.shape() != (src.len(), self.feature_dim) {
                return Err(Error::Shape(format!(
                    "feature matrix is {}x{}, expected {}x{}",
                    b.rows,
                    b.cols,
                    src.len(),
                    self.feature_dim
                )));
            }
        }
        Ok(())
    }

    /// Records the encoder; returns `R` and the adapted features (when fusing).
    pub fn encode_on(&self, t: &mut Tape, src: &[u32], features: Option<&Matrix>) -> Result<(NodeId, Option<NodeId>)> {
        self.check_source(src, features)?;
        let b = match (self.config.fusion, features, &self.adapter) {
            (true, Some(f), Some(adapter)) => {
                let raw = t.input(f.clone());
                Some(adapter.apply(t, raw))
            }
            _ => None,
        };
        let mut h = embed(t, self.src_embed, self.src_pos, src, self.config.dim);
        h = t.dropout(h, self.config.dropout);
        for layer in &self.encoder {
            h = layer.forward(t, &self.config, h, b, FeatureAttention::Independent)?;
        }
        Ok((h, b))
    }

    /// Projects `R` and the features for every decoder layer.
    pub(crate) fn memory_on(&self, t: &mut Tape, r: NodeId, b: Option<NodeId>) -> Memory {
        Memory {
            layers: self.decoder.iter().map(|l| l.memory(t, r, b)).collect(),
        }
    }

    fn check_prefix(&self, prefix: &[u32]) -> Result<()> {
        if prefix.is_empty() {
            return Err(Error::Shape("target prefix is empty".into()));
        }
        if prefix.len() > self.config.max_target_len {
            return Err(Error::TooLong {
                len: prefix.len(),
                max: self.config.max_target_len,
            });
        }
        self.check_ids(prefix)
    }

    /// Records the decoder over `prefix`; returns logits, one row per position.
    pub fn decode_on(&self, t: &mut Tape, prefix: &[u32], r: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        self.check_prefix(prefix)?;
        let mem = self.memory_on(t, r, b);
        let mut h = embed(t, self.tgt_embed, self.tgt_pos, prefix, self.config.dim);
        h = t.dropout(h, self.config.dropout);
        for (layer, m) in self.decoder.iter().zip(&mem.layers) {
            h = layer.forward(t, &self.config, h, m);
        }
        Ok(self.out.apply(t, h))
    }

    pub(crate) fn step_cache(&self) -> StepCache {
        let d = self.config.dim;
        StepCache {
            keys: vec![Matrix::zeros(0, d); self.decoder.len()],
            values: vec![Matrix::zeros(0, d); self.decoder.len()],
            len: 0,
        }
    }

    /// Feeds one token at the next position; returns its logits (1 row).
    /// Matches the corresponding row of [`Seq2Seq::decode_on`].
    pub(crate) fn step_on(&self, t: &mut Tape, token: u32, cache: &mut StepCache, mem: &Memory) -> Result<NodeId> {
        if cache.len >= self.config.max_target_len {
            return Err(Error::TooLong {
                len: cache.len + 1,
                max: self.config.max_target_len,
            });
        }
        self.check_ids(&[token])?;
        let tab = t.param(self.tgt_embed);
        let x = t.gather(tab, &[token as usize]);
        let x = t.scale(x, (self.config.dim as f64).sqrt());
        let pt = t.param(self.tgt_pos);
        let p = t.gather(pt, &[cache.len]);
        let mut h = t.add(x, p);
        h = t.dropout(h, self.config.dropout);
        for (l, (layer, m)) in self.decoder.iter().zip(&mem.layers).enumerate() {
            h = layer.step(t, &self.config, h, &mut cache.keys[l], &mut cache.values[l], m);
        }
        cache.len += 1;
        Ok(self.out.apply(t, h))
    }

    /// Encoder output `R` for a source (no dropout).
    pub fn encode(&self, src: &[u32], features: Option<&Matrix>) -> Result<Matrix> {
        let mut t = Tape::new(&self.params);
        let (r, _) = self.encode_on(&mut t, src, features)?;
        Ok(t.value(r).clone())
    }

    /// Next-token log-probabilities at every prefix position, given `R`
    /// and the raw provider features of the source.
    pub fn decode_forward(&self, prefix: &[u32], r: &Matrix, features: Option<&Matrix>) -> Result<Matrix> {
        if r.cols != self.config.dim {
            return Err(Error::Shape(format!("R has width {}, expected {}", r.cols, self.config.dim)));
        }
        let mut t = Tape::new(&self.params);
        let b = match (self.config.fusion, &self.adapter) {
            (true, Some(adapter)) => {
                let f = features.ok_or_else(|| Error::Shape("fusion is on but no feature matrix was given".into()))?;
                if f.shape() != (r.rows, self.feature_dim) {
                    return Err(Error::Shape("feature rows must match R rows".into()));
                }
                let raw = t.input(f.clone());
                Some(adapter.apply(&mut t, raw))
            }
            _ => None,
        };
        let rn = t.input(r.clone());
        let logits = self.decode_on(&mut t, prefix, rn, b)?;
        Ok(log_softmax_rows(t.value(logits)))
    }
}
