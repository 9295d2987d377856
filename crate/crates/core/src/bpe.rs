//! Byte-pair-encoding subword tokenizer with atomic reserved tokens.
//!
//! Words are whitespace-separated; the last symbol of each word carries the
//! `</w>` end-of-word marker, so decoding can restore word boundaries.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linearize::{DRUG_TAG, INTERACTION_TAG, TARGET_TAG};

pub const END_OF_WORD: &str = "</w>";
pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const SOS: &str = "<s>";
pub const EOS: &str = "</s>";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const SOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;

/// The reserved tokens every model carries, in id order.
pub fn default_reserved() -> Vec<String> {
    [PAD, UNK, SOS, EOS, DRUG_TAG, INTERACTION_TAG, TARGET_TAG]
        .into_iter()
        .map(String::from)
        .collect()
}

const LEADING_PUNCT: &[char] = &['(', '[', '{', '"', '\'', '“', '‘'];
const TRAILING_PUNCT: &[char] = &['.', ',', ';', ':', ')', ']', '}', '!', '?', '"', '\'', '”', '’'];

/// Splits leading/trailing punctuation off whitespace tokens so that entity
/// names followed by a full stop tokenize the same as bare names.
pub fn pretokenize(text: &str) -> String {
    let mut out: Vec<&str> = Vec::new();
    for tok in text.split_whitespace() {
        if tok.starts_with('<') && tok.ends_with('>') {
            out.push(tok);
            continue;
        }
        let mut core = tok;
        let mut tail = Vec::new();
        while let Some(c) = core.chars().next().filter(|c| LEADING_PUNCT.contains(c)) {
            out.push(&core[..c.len_utf8()]);
            core = &core[c.len_utf8()..];
        }
        while let Some(c) = core.chars().next_back().filter(|c| TRAILING_PUNCT.contains(c)) {
            let at = core.len() - c.len_utf8();
            tail.push(&core[at..]);
            core = &core[..at];
        }
        if !core.is_empty() {
            out.push(core);
        }
        out.extend(tail.into_iter().rev());
    }
    out.join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BpeModel {
    pub merges: Vec<(String, String)>,
    pub vocab: BTreeMap<String, u32>,
    pub reserved: Vec<String>,
    #[serde(skip)]
    tokens: Vec<String>,
    #[serde(skip)]
    ranks: HashMap<(String, String), usize>,
}

impl BpeModel {
    fn from_parts(merges: Vec<(String, String)>, vocab: BTreeMap<String, u32>, reserved: Vec<String>) -> Result<Self> {
        let mut tokens = vec![String::new(); vocab.len()];
        for (tok, &id) in &vocab {
            let slot = tokens
                .get_mut(id as usize)
                .ok_or_else(|| Error::Config(format!("vocabulary ids are not dense (id {id})")))?;
            *slot = tok.clone();
        }
        if tokens.iter().any(String::is_empty) {
            return Err(Error::Config("vocabulary ids are not dense".into()));
        }
        let ranks = merges.iter().cloned().enumerate().map(|(i, p)| (p, i)).collect();
        Ok(BpeModel {
            merges,
            vocab,
            reserved,
            tokens,
            ranks,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.vocab.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Stable content hash of the model, used to tie checkpoints to vocabularies.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("bpe model serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: BpeModel = serde_json::from_str(&text)?;
        Self::from_parts(raw.merges, raw.vocab, raw.reserved)
    }

    /// Rebuilds lookup tables after deserialization.
    pub fn rehydrate(self) -> Result<Self> {
        Self::from_parts(self.merges, self.vocab, self.reserved)
    }

    fn is_reserved(&self, word: &str) -> bool {
        self.reserved.iter().any(|r| r == word)
    }

    fn merge_word(&self, mut symbols: Vec<String>) -> Vec<String> {
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let (a, b) = &self.merges[rank];
            let mut out = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && &symbols[i] == a && &symbols[i + 1] == b {
                    out.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = out;
        }
        symbols
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            if self.is_reserved(word) && word != UNK {
                ids.push(self.vocab[word]);
                continue;
            }
            let mut symbols = initial_symbols(word);
            // an unknown final symbol keeps its word boundary as a bare marker
            if let Some(last) = symbols.last() {
                if !self.vocab.contains_key(last) && last.ends_with(END_OF_WORD) {
                    let bare = last.strip_suffix(END_OF_WORD).unwrap().to_string();
                    symbols.pop();
                    symbols.push(bare);
                    symbols.push(END_OF_WORD.to_string());
                }
            }
            for sym in self.merge_word(symbols) {
                ids.push(self.vocab.get(&sym).copied().unwrap_or(UNK_ID));
            }
        }
        ids
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut words: Vec<String> = Vec::new();
        let mut cur = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or(Error::TokenOutOfRange {
                id: id as usize,
                size: self.vocab_size(),
            })?;
            if id == UNK_ID {
                cur.push_str(UNK);
            } else if self.is_reserved(tok) {
                if !cur.is_empty() {
                    words.push(std::mem::take(&mut cur));
                }
                words.push(tok.to_string());
            } else if let Some(stem) = tok.strip_suffix(END_OF_WORD) {
                cur.push_str(stem);
                words.push(std::mem::take(&mut cur));
            } else {
                cur.push_str(tok);
            }
        }
        if !cur.is_empty() {
            words.push(cur);
        }
        Ok(words.join(" "))
    }

    /// Decodes only the content between special tokens, dropping padding,
    /// start and end markers.
    pub fn decode_skip_special(&self, ids: &[u32]) -> Result<String> {
        let kept: Vec<u32> = ids
            .iter()
            .copied()
            .filter(|&i| !matches!(i, PAD_ID | SOS_ID | EOS_ID))
            .collect();
        self.decode(&kept)
    }
}

/// Splits a word into characters, with `<unk>` literals kept whole and the
/// end-of-word marker attached to the last symbol.
fn initial_symbols(word: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut rest = word;
    while !rest.is_empty() {
        if let Some(r) = rest.strip_prefix(UNK) {
            out.push(UNK.to_string());
            rest = r;
            continue;
        }
        let c = rest.chars().next().unwrap();
        out.push(c.to_string());
        rest = &rest[c.len_utf8()..];
    }
    if let Some(last) = out.last_mut() {
        last.push_str(END_OF_WORD);
    }
    out
}

fn forms_reserved(reserved: &[String], a: &str, b: &str) -> bool {
    reserved
        .iter()
        .any(|r| r == a || r == b || (r.len() == a.len() + b.len() && r.starts_with(a) && r.ends_with(b)))
}

/// Learns `num_merges` merges over the whitespace words of `texts`.
///
/// Each step merges the most frequent adjacent symbol pair; ties go to the
/// lexicographically smallest pair. Training stops early once no adjacent
/// pair remains. Words equal to a reserved token are skipped.
pub fn train_bpe<S: AsRef<str>>(texts: &[S], num_merges: usize, reserved: &[String]) -> Result<BpeModel> {
    if texts.is_empty() {
        return Err(Error::Config("cannot train a tokenizer on an empty corpus".into()));
    }
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for text in texts {
        for w in text.as_ref().split_whitespace() {
            if !reserved.iter().any(|r| r == w) {
                *freq.entry(w).or_default() += 1;
            }
        }
    }
    let mut words: Vec<(Vec<String>, usize)> = freq.iter().map(|(w, &n)| (initial_symbols(w), n)).collect();

    let mut vocab: BTreeMap<String, u32> = BTreeMap::new();
    for r in reserved {
        let next = vocab.len() as u32;
        vocab.entry(r.clone()).or_insert(next);
    }
    let mut alphabet: Vec<String> = words.iter().flat_map(|(s, _)| s.iter().cloned()).collect();
    alphabet.push(END_OF_WORD.to_string());
    alphabet.sort();
    alphabet.dedup();
    for sym in alphabet {
        let next = vocab.len() as u32;
        vocab.entry(sym).or_insert(next);
    }

    let mut merges = Vec::new();
    for _ in 0..num_merges {
        let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
        for (syms, n) in &words {
            for w in syms.windows(2) {
                if forms_reserved(reserved, &w[0], &w[1]) {
                    continue;
                }
                *counts.entry((w[0].as_str(), w[1].as_str())).or_default() += n;
            }
        }
        let Some((pair, _)) = counts
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
        else {
            break;
        };
        let (a, b) = (pair.0.to_string(), pair.1.to_string());
        let merged = format!("{a}{b}");
        for (syms, _) in words.iter_mut() {
            if syms.len() < 2 {
                continue;
            }
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut syms[i]));
                    i += 1;
                }
            }
            *syms = out;
        }
        let next = vocab.len() as u32;
        vocab.entry(merged).or_insert(next);
        merges.push((a, b));
    }
    BpeModel::from_parts(merges, vocab, reserved.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair_counts(text: &str) -> BTreeMap<(String, String), usize> {
        // independent oracle: count adjacent char pairs per word occurrence
        let mut m = BTreeMap::new();
        for w in text.split(' ') {
            let mut syms: Vec<String> = w.chars().map(|c| c.to_string()).collect();
            if let Some(l) = syms.last_mut() {
                l.push_str("</w>");
            }
            for i in 1..syms.len() {
                *m.entry((syms[i - 1].clone(), syms[i].clone())).or_insert(0) += 1;
            }
        }
        m
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let text = "low low lower";
        let model = train_bpe(&[text], 1, &default_reserved()).unwrap();
        let counts = pair_counts(text);
        let best = counts.values().max().unwrap();
        let expected = counts.iter().find(|(_, c)| *c == best).map(|(p, _)| p.clone()).unwrap();
        assert_eq!(model.merges[0], expected);
        assert_eq!(model.merges[0], ("l".to_string(), "o".to_string()));
    }

    #[test]
    fn zero_merges_is_character_level() {
        let model = train_bpe(&["abc ab"], 0, &default_reserved()).unwrap();
        assert!(model.merges.is_empty());
        let ids = model.encode("abc");
        let toks: Vec<_> = ids.iter().map(|&i| model.token(i).unwrap()).collect();
        assert_eq!(toks, ["a", "b", "c</w>"]);
    }

    #[test]
    fn reserved_tokens_are_atomic() {
        let text = "<d> aspirin <i> inhibitor <t> cox-1 <d>d <d>";
        let model = train_bpe(&[text], 200, &default_reserved()).unwrap();
        for (a, b) in &model.merges {
            assert!(!model.reserved.contains(a) && !model.reserved.contains(b));
        }
        let ids = model.encode("<d> aspirin");
        assert_eq!(ids[0], model.id("<d>").unwrap());
        assert_eq!(model.decode(&ids).unwrap(), "<d> aspirin");
    }

    #[test]
    fn unknown_characters() {
        let model = train_bpe(&["abc"], 10, &default_reserved()).unwrap();
        let ids = model.encode("abz");
        assert!(ids.contains(&UNK_ID));
        assert_eq!(model.decode(&ids).unwrap(), "ab<unk>");
        assert_eq!(model.encode(&model.decode(&ids).unwrap()), ids);
        assert!(matches!(model.decode(&[9999]), Err(Error::TokenOutOfRange { id: 9999, .. })));
    }

    #[test]
    fn pretokenize_splits_edge_punctuation() {
        assert_eq!(pretokenize("Aspirin (ASA) blocks COX-1."), "Aspirin ( ASA ) blocks COX-1 .");
        assert_eq!(pretokenize("<d> x,"), "<d> x ,");
    }

    #[test]
    fn file_round_trip() {
        let model = train_bpe(&["hello world hello"], 5, &default_reserved()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bpe.json");
        model.save(&p).unwrap();
        let back = BpeModel::load(&p).unwrap();
        assert_eq!(back.encode("hello world"), model.encode("hello world"));
        assert_eq!(back.hash(), model.hash());
    }

    fn corpus() -> impl Strategy<Value = Vec<String>> {
        proptest::collection::vec("[a-e]{1,6}( [a-e]{1,6}){0,5}", 1..6)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn invariants(texts in corpus(), merges in 0usize..30, probe in "[a-f]{1,5}( [a-f]{1,5}){0,3}") {
            let reserved = default_reserved();
            let model = train_bpe(&texts, merges, &reserved).unwrap();
            // determinism
            prop_assert_eq!(&train_bpe(&texts, merges, &reserved).unwrap(), &model);
            // vocabulary bound
            let alphabet: std::collections::BTreeSet<String> =
                texts.iter().flat_map(|t| t.split(' ')).flat_map(initial_symbols).collect();
            prop_assert!(model.vocab_size() <= alphabet.len() + 1 + merges + reserved.len());
            // round trip over the training alphabet
            for t in &texts {
                prop_assert_eq!(&model.decode(&model.encode(t)).unwrap(), t);
            }
            // normal form
            let ids = model.encode(&probe);
            prop_assert_eq!(model.encode(&model.decode(&ids).unwrap()), ids);
        }
    }
}
