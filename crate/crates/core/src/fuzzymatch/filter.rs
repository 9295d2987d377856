use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{triplet_score, DocIndex, EditBudget};
use crate::corpus::{LabeledExample, Lexicons};
use crate::error::{Error, Result};
use crate::par::{self, Exec};

/// Best triplet score of an example, or `None` when it has no triplets.
pub fn example_score(ex: &LabeledExample, lexicons: &Lexicons, budget: &EditBudget) -> Option<i32> {
    let index = DocIndex::new(&ex.document);
    ex.triplets
        .iter()
        .map(|t| triplet_score(&index, t, lexicons, budget))
        .max()
}

pub fn score_examples(
    examples: &[LabeledExample],
    lexicons: &Lexicons,
    budget: &EditBudget,
    exec: Exec,
) -> Vec<Option<i32>> {
    par::map(exec, examples, |ex| example_score(ex, lexicons, budget))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Splits {
    pub test: Vec<LabeledExample>,
    pub valid: Vec<LabeledExample>,
    pub train: Vec<LabeledExample>,
    /// Scores of the kept examples, in test/valid/train order.
    pub scores: Vec<i32>,
    /// Number of examples removed for scoring below zero.
    pub removed_negative: usize,
}

/// Scores every example, then applies [`rank_and_split`].
pub fn filter_and_split(
    examples: &[LabeledExample],
    lexicons: &Lexicons,
    top_k: usize,
    split: (usize, usize, usize),
    seed: u64,
    budget: &EditBudget,
    exec: Exec,
) -> Result<Splits> {
    let scores = score_examples(examples, lexicons, budget, exec);
    rank_and_split(examples, &scores, top_k, split, seed)
}

/// Drops examples scoring below zero (or unscored), ranks the rest by
/// descending score (ties ordered by id, then shuffled with `seed`), keeps
/// the best `top_k` and cuts them into `(test, valid, train)` in ranked order.
pub fn rank_and_split(
    examples: &[LabeledExample],
    scores: &[Option<i32>],
    top_k: usize,
    split: (usize, usize, usize),
    seed: u64,
) -> Result<Splits> {
    if scores.len() != examples.len() {
        return Err(Error::LengthMismatch {
            what: "scores vs examples",
            left: scores.len(),
            right: examples.len(),
        });
    }
    let (n_test, n_valid, n_train) = split;
    let wanted = n_test + n_valid + n_train;
    if wanted > top_k {
        return Err(Error::Config(format!("split sizes sum to {wanted}, more than top-k {top_k}")));
    }
    let mut ranked: Vec<(i32, usize)> = scores
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.filter(|&s| s >= 0).map(|s| (s, i)))
        .collect();
    let removed_negative = examples.len() - ranked.len();
    ranked.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| examples[a.1].document.id.cmp(&examples[b.1].document.id)));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut start = 0;
    while start < ranked.len() {
        let end = start + ranked[start..].iter().take_while(|r| r.0 == ranked[start].0).count();
        ranked[start..end].shuffle(&mut rng);
        start = end;
    }
    ranked.truncate(top_k);
    if ranked.len() < wanted {
        return Err(Error::NotEnoughExamples {
            available: ranked.len(),
            requested: wanted,
        });
    }
    let take = |range: std::ops::Range<usize>| -> Vec<LabeledExample> {
        ranked[range].iter().map(|&(_, i)| examples[i].clone()).collect()
    };
    Ok(Splits {
        test: take(0..n_test),
        valid: take(n_test..n_test + n_valid),
        train: take(n_test + n_valid..wanted),
        scores: ranked[..wanted].iter().map(|r| r.0).collect(),
        removed_negative,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Document, DtiTriplet};

    fn lexicons() -> Lexicons {
        let mut lex = Lexicons::default();
        lex.drug.insert("aspirin", []);
        lex.target.insert("cox-1", []);
        lex.interaction.insert("inhibitor", []);
        lex
    }

    fn ex(id: &str, text: &str) -> LabeledExample {
        LabeledExample::new(Document::new(id, "", text), vec![DtiTriplet::new("aspirin", "cox-1", "inhibitor")])
    }

    #[test]
    fn scores_and_negative_removal() {
        let b = EditBudget::default();
        let corpus = vec![
            ex("a", "aspirin is an inhibitor of cox-1."),
            ex("b", "nothing at all."),
            ex("c", "aspirin here."),
            // drug positive via two variants, others absent: 1 - 1 - 1
            ex("d", "aspirins and more aspirins."),
        ];
        let scores = score_examples(&corpus, &lexicons(), &b, Exec::Sequential);
        assert_eq!(scores, vec![Some(15), Some(-3), Some(3), Some(-1)]);
        let s = filter_and_split(&corpus, &lexicons(), 10, (1, 0, 1), 0, &b, Exec::Sequential).unwrap();
        assert_eq!(s.removed_negative, 2);
        assert_eq!(s.test[0].document.id, "a");
        assert_eq!(s.train[0].document.id, "c");
    }

    #[test]
    fn zero_score_is_kept() {
        // three odd terms never sum to zero, so feed the ranking directly
        let corpus = vec![ex("z", "x"), ex("m", "y")];
        let s = rank_and_split(&corpus, &[Some(0), Some(-1)], 5, (0, 0, 1), 3).unwrap();
        assert_eq!(s.train[0].document.id, "z");
        assert_eq!(s.scores, vec![0]);
        assert_eq!(s.removed_negative, 1);
    }

    #[test]
    fn split_sizes_exact() {
        let lex = lexicons();
        let corpus: Vec<_> = (0..100).map(|i| ex(&format!("d{i:03}"), "aspirin inhibitor cox-1")).collect();
        let b = EditBudget::default();
        let s = filter_and_split(&corpus, &lex, 50, (5, 5, 40), 7, &b, Exec::Parallel).unwrap();
        assert_eq!((s.test.len(), s.valid.len(), s.train.len()), (5, 5, 40));
        let again = filter_and_split(&corpus, &lex, 50, (5, 5, 40), 7, &b, Exec::Sequential).unwrap();
        assert_eq!(s.test, again.test);
        assert!(matches!(
            filter_and_split(&corpus[..3], &lex, 50, (5, 5, 40), 7, &b, Exec::Sequential),
            Err(Error::NotEnoughExamples { available: 3, requested: 50 })
        ));
    }
}
