//! Corpus statistics: sizes, entity inventories, the interaction
//! distribution and drug-target mention distances.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{normalize, split_sentences, LabeledExample, Lexicons};
use crate::fuzzymatch::{DocIndex, EditBudget};
use crate::metrics::min_dt_distance_indexed;
use crate::par::{self, Exec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceSummary {
    /// (document, triplet) pairs with both drug and target found.
    pub measured: usize,
    /// Pairs where the drug or the target was not found.
    pub missing: usize,
    pub total: usize,
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub documents: usize,
    /// Title and abstract are split separately.
    pub sentences: usize,
    /// Whitespace-separated tokens of title and abstract.
    pub words: usize,
    pub triplets: usize,
    pub distinct_drugs: usize,
    pub distinct_targets: usize,
    pub distinct_interactions: usize,
    /// Normalized interaction → number of triplets.
    pub interaction_histogram: BTreeMap<String, usize>,
    pub min_dt_distance: DistanceSummary,
}

pub fn sentence_count(ex: &LabeledExample) -> usize {
    split_sentences(&ex.document.title).len() + split_sentences(&ex.document.abstract_text).len()
}

pub fn word_count(ex: &LabeledExample) -> usize {
    ex.document.title.split_whitespace().count() + ex.document.abstract_text.split_whitespace().count()
}

pub fn corpus_stats(corpus: &[LabeledExample], lexicons: &Lexicons, budget: &EditBudget, exec: Exec) -> CorpusStats {
    let per_doc = par::map(exec, corpus, |ex| {
        let idx = DocIndex::new(&ex.document);
        let dists: Vec<Option<usize>> = ex
            .triplets
            .iter()
            .map(|t| min_dt_distance_indexed(&idx, t, lexicons, budget))
            .collect();
        (sentence_count(ex), word_count(ex), dists)
    });

    let mut drugs = BTreeSet::new();
    let mut targets = BTreeSet::new();
    let mut histogram = BTreeMap::new();
    let mut triplets = 0;
    for ex in corpus {
        for t in &ex.triplets {
            triplets += 1;
            drugs.insert(normalize(&t.drug));
            targets.insert(normalize(&t.target));
            *histogram.entry(normalize(&t.interaction)).or_insert(0) += 1;
        }
    }

    let (mut measured, mut missing, mut sum) = (0usize, 0usize, 0usize);
    for d in per_doc.iter().flat_map(|p| &p.2) {
        match d {
            Some(v) => {
                measured += 1;
                sum += v;
            }
            None => missing += 1,
        }
    }
    CorpusStats {
        documents: corpus.len(),
        sentences: per_doc.iter().map(|p| p.0).sum(),
        words: per_doc.iter().map(|p| p.1).sum(),
        triplets,
        distinct_drugs: drugs.len(),
        distinct_targets: targets.len(),
        distinct_interactions: histogram.len(),
        interaction_histogram: histogram,
        min_dt_distance: DistanceSummary {
            measured,
            missing,
            total: measured + missing,
            mean: (measured > 0).then(|| sum as f64 / measured as f64),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Document, DtiTriplet};

    #[test]
    fn counts_on_a_small_corpus() {
        let mut lx = Lexicons::default();
        lx.drug.insert("zolmitrexan", []);
        lx.target.insert("kaxver receptor", []);
        let c = vec![
            LabeledExample::new(
                Document::new("a", "A title", "zolmitrexan works. It binds one two kaxver receptor!"),
                vec![
                    DtiTriplet::new("zolmitrexan", "kaxver receptor", "inhibitor"),
                    DtiTriplet::new("zolmitrexan", "absent target", "Inhibitor"),
                ],
            ),
            LabeledExample::new(Document::new("b", "", "Just one sentence"), vec![]),
        ];
        let s = corpus_stats(&c, &lx, &EditBudget::default(), Exec::Sequential);
        assert_eq!(s.documents, 2);
        assert_eq!(s.sentences, 4);
        assert_eq!(s.words, 2 + 8 + 3);
        assert_eq!(s.triplets, 2);
        assert_eq!(s.interaction_histogram.values().sum::<usize>(), 2);
        assert_eq!(s.distinct_interactions, 1);
        assert_eq!(s.distinct_targets, 2);
        assert_eq!(s.min_dt_distance.measured, 1);
        assert_eq!(s.min_dt_distance.missing, 1);
        assert_eq!(s.min_dt_distance.mean, Some(6.0));
    }
}
