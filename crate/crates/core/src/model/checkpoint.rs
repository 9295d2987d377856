use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::Seq2Seq;
use super::optim::Adam;
use super::provider::FeatureProvider;
use crate::bpe::BpeModel;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "dtigen-checkpoint/1";

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub vocab_hash: String,
    pub step: u64,
    pub bpe: BpeModel,
    pub provider: FeatureProvider,
    pub model: Seq2Seq,
    pub optimizer: Adam,
}

impl Checkpoint {
    pub fn new(model: Seq2Seq, optimizer: Adam, bpe: BpeModel, provider: FeatureProvider) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            vocab_hash: bpe.hash(),
            step: optimizer.step,
            bpe,
            provider,
            model,
            optimizer,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, self)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut ck: Checkpoint = serde_json::from_reader(BufReader::new(file))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("unsupported checkpoint format {:?}", ck.format)));
        }
        ck.bpe = ck.bpe.rehydrate()?;
        if ck.bpe.hash() != ck.vocab_hash {
            return Err(Error::Config("checkpoint vocabulary hash does not match its tokenizer".into()));
        }
        if ck.bpe.vocab_size() != ck.model.vocab_size {
            return Err(Error::Shape(format!(
                "tokenizer has {} entries but the model expects {}",
                ck.bpe.vocab_size(),
                ck.model.vocab_size
            )));
        }
        if ck.provider.dim() != ck.model.feature_dim {
            return Err(Error::Shape("feature provider width does not match the model".into()));
        }
        Ok(ck)
    }
}
