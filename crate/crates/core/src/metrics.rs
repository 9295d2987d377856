//! Triplet-, ontology- and entity-level evaluation plus run aggregation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{normalize, Document, DtiTriplet, Lexicons, TripletKey};
use crate::error::{Error, Result};
use crate::fuzzymatch::{lexicon_synonyms, retrieve, DocIndex, EditBudget};
use crate::par::{self, Exec};

/// Division-by-zero conventions, recorded in every report.
pub const CONVENTIONS: [&str; 5] = [
    "triplet: empty prediction set gives a per-document precision term of 0",
    "triplet: empty gold set gives a per-document recall term of 0",
    "triplet: empty gold and empty prediction give per-document precision and recall of 1",
    "ontology: empty prediction union gives precision 0, empty gold union gives recall 0, both empty give 1",
    "entity: both projected sets empty gives Jaccard 1",
];

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EntityAccuracy {
    pub drug: f64,
    pub target: f64,
    pub interaction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentScore {
    pub id: String,
    pub n_gold: usize,
    pub n_pred: usize,
    pub n_correct: usize,
    pub precision: f64,
    pub recall: f64,
    pub entity: EntityAccuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_documents: usize,
    pub triplet: Prf,
    pub ontology: Prf,
    pub entity: EntityAccuracy,
    pub conventions: Vec<String>,
    pub per_document: Vec<DocumentScore>,
}

type KeySet = BTreeSet<TripletKey>;

fn key_set(ts: &[DtiTriplet]) -> KeySet {
    ts.iter().map(DtiTriplet::key).collect()
}

fn check_aligned(gold: usize, pred: usize) -> Result<()> {
    if gold != pred {
        return Err(Error::LengthMismatch {
            what: "gold vs predicted documents",
            left: gold,
            right: pred,
        });
    }
    if gold == 0 {
        return Err(Error::Config("evaluation needs at least one document".into()));
    }
    Ok(())
}

/// Per-document (precision, recall) terms.
fn doc_pr(gold: &KeySet, pred: &KeySet) -> (f64, f64, usize) {
    if gold.is_empty() && pred.is_empty() {
        return (1.0, 1.0, 0);
    }
    let hit = gold.intersection(pred).count();
    let p = if pred.is_empty() { 0.0 } else { hit as f64 / pred.len() as f64 };
    let r = if gold.is_empty() { 0.0 } else { hit as f64 / gold.len() as f64 };
    (p, r, hit)
}

fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    a.intersection(b).count() as f64 / a.union(b).count() as f64
}

fn doc_entity(gold: &[DtiTriplet], pred: &[DtiTriplet]) -> EntityAccuracy {
    let proj = |ts: &[DtiTriplet], f: fn(&DtiTriplet) -> &str| -> BTreeSet<String> {
        ts.iter().map(|t| normalize(f(t))).collect()
    };
    let acc = |f: fn(&DtiTriplet) -> &str| jaccard(&proj(gold, f), &proj(pred, f));
    EntityAccuracy {
        drug: acc(|t| &t.drug),
        target: acc(|t| &t.target),
        interaction: acc(|t| &t.interaction),
    }
}

fn mean(xs: impl Iterator<Item = f64>, n: usize) -> f64 {
    xs.sum::<f64>() / n as f64
}

/// Per-document precision and recall, averaged over documents.
pub fn triplet_prf(gold: &[Vec<DtiTriplet>], pred: &[Vec<DtiTriplet>]) -> Result<Prf> {
    check_aligned(gold.len(), pred.len())?;
    let terms: Vec<_> = gold.iter().zip(pred).map(|(g, p)| doc_pr(&key_set(g), &key_set(p))).collect();
    let n = terms.len();
    Ok(Prf::new(
        mean(terms.iter().map(|t| t.0), n),
        mean(terms.iter().map(|t| t.1), n),
    ))
}

/// Precision and recall over the corpus-wide unions of triplets.
pub fn ontology_prf(gold: &[Vec<DtiTriplet>], pred: &[Vec<DtiTriplet>]) -> Result<Prf> {
    check_aligned(gold.len(), pred.len())?;
    let g: KeySet = gold.iter().flat_map(|d| d.iter().map(DtiTriplet::key)).collect();
    let p: KeySet = pred.iter().flat_map(|d| d.iter().map(DtiTriplet::key)).collect();
    let (precision, recall, _) = doc_pr(&g, &p);
    Ok(Prf::new(precision, recall))
}

/// Per-document Jaccard of the projected drug/target/interaction sets, averaged.
pub fn entity_accuracies(gold: &[Vec<DtiTriplet>], pred: &[Vec<DtiTriplet>]) -> Result<EntityAccuracy> {
    check_aligned(gold.len(), pred.len())?;
    let per: Vec<_> = gold.iter().zip(pred).map(|(g, p)| doc_entity(g, p)).collect();
    let n = per.len();
    Ok(EntityAccuracy {
        drug: mean(per.iter().map(|e| e.drug), n),
        target: mean(per.iter().map(|e| e.target), n),
        interaction: mean(per.iter().map(|e| e.interaction), n),
    })
}

/// Full report with a per-document breakdown. `ids` labels the documents.
pub fn evaluate(ids: &[String], gold: &[Vec<DtiTriplet>], pred: &[Vec<DtiTriplet>], exec: Exec) -> Result<EvalReport> {
    check_aligned(gold.len(), pred.len())?;
    if ids.len() != gold.len() {
        return Err(Error::LengthMismatch {
            what: "ids vs documents",
            left: ids.len(),
            right: gold.len(),
        });
    }
    let idx: Vec<usize> = (0..gold.len()).collect();
    let per_document = par::map(exec, &idx, |&i| {
        let (g, p) = (key_set(&gold[i]), key_set(&pred[i]));
        let (precision, recall, n_correct) = doc_pr(&g, &p);
        DocumentScore {
            id: ids[i].clone(),
            n_gold: g.len(),
            n_pred: p.len(),
            n_correct,
            precision,
            recall,
            entity: doc_entity(&gold[i], &pred[i]),
        }
    });
    let n = per_document.len();
    Ok(EvalReport {
        n_documents: n,
        triplet: Prf::new(
            mean(per_document.iter().map(|d| d.precision), n),
            mean(per_document.iter().map(|d| d.recall), n),
        ),
        ontology: ontology_prf(gold, pred)?,
        entity: EntityAccuracy {
            drug: mean(per_document.iter().map(|d| d.entity.drug), n),
            target: mean(per_document.iter().map(|d| d.entity.target), n),
            interaction: mean(per_document.iter().map(|d| d.entity.interaction), n),
        },
        conventions: CONVENTIONS.iter().map(|s| s.to_string()).collect(),
        per_document,
    })
}

/// Smallest whitespace-token distance between any drug mention and any
/// target mention of `triplet` in `doc`; `None` if either is absent.
pub fn min_dt_distance(doc: &Document, triplet: &DtiTriplet, lexicons: &Lexicons, budget: &EditBudget) -> Option<usize> {
    min_dt_distance_indexed(&DocIndex::new(doc), triplet, lexicons, budget)
}

pub fn min_dt_distance_indexed(
    index: &DocIndex,
    triplet: &DtiTriplet,
    lexicons: &Lexicons,
    budget: &EditBudget,
) -> Option<usize> {
    let positions = |name: &str, lex| -> Vec<usize> {
        retrieve(name, &lexicon_synonyms(lex, name), index, budget)
            .iter()
            .map(|s| index.token_index(s.start))
            .collect()
    };
    let drugs = positions(&triplet.drug, &lexicons.drug);
    let targets = positions(&triplet.target, &lexicons.target);
    drugs
        .iter()
        .flat_map(|d| targets.iter().map(move |t| d.abs_diff(*t)))
        .min()
}

/// Flat view of the headline numbers of a report.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricVector {
    pub triplet: Prf,
    pub ontology: Prf,
    pub entity: EntityAccuracy,
}

impl MetricVector {
    fn to_array(self) -> [f64; 9] {
        let (t, o, e) = (self.triplet, self.ontology, self.entity);
        [
            t.precision, t.recall, t.f1, o.precision, o.recall, o.f1, e.drug, e.target, e.interaction,
        ]
    }

    fn from_array(a: [f64; 9]) -> Self {
        // f1 here is a statistic of f1 values, not recomputed from P and R
        MetricVector {
            triplet: Prf {
                precision: a[0],
                recall: a[1],
                f1: a[2],
            },
            ontology: Prf {
                precision: a[3],
                recall: a[4],
                f1: a[5],
            },
            entity: EntityAccuracy {
                drug: a[6],
                target: a[7],
                interaction: a[8],
            },
        }
    }
}

impl From<&EvalReport> for MetricVector {
    fn from(r: &EvalReport) -> Self {
        MetricVector {
            triplet: r.triplet,
            ontology: r.ontology,
            entity: r.entity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub n_runs: usize,
    /// Set when only one run was given and the deviation is reported as 0.
    pub single_run: bool,
    pub mean: MetricVector,
    pub std: MetricVector,
}

/// Per-field mean and sample (n - 1) standard deviation.
pub fn aggregate_runs(reports: &[EvalReport]) -> Result<RunAggregate> {
    if reports.is_empty() {
        return Err(Error::Config("aggregate_runs needs at least one report".into()));
    }
    let rows: Vec<[f64; 9]> = reports.iter().map(|r| MetricVector::from(r).to_array()).collect();
    let n = rows.len();
    let mut mu = [0.0; 9];
    let mut sd = [0.0; 9];
    for k in 0..9 {
        mu[k] = rows.iter().map(|r| r[k]).sum::<f64>() / n as f64;
        if n > 1 {
            let ss: f64 = rows.iter().map(|r| (r[k] - mu[k]).powi(2)).sum();
            sd[k] = (ss / (n - 1) as f64).sqrt();
        }
    }
    Ok(RunAggregate {
        n_runs: n,
        single_run: n == 1,
        mean: MetricVector::from_array(mu),
        std: MetricVector::from_array(sd),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(d: &str, tg: &str, i: &str) -> DtiTriplet {
        DtiTriplet::new(d, tg, i)
    }

    #[test]
    fn identity_is_perfect() {
        let g = vec![vec![t("a", "b", "c")], vec![t("x", "y", "z"), t("a", "y", "c")]];
        assert_eq!(triplet_prf(&g, &g).unwrap(), Prf::new(1.0, 1.0));
        assert_eq!(ontology_prf(&g, &g).unwrap().f1, 1.0);
        let e = entity_accuracies(&g, &g).unwrap();
        assert_eq!((e.drug, e.target, e.interaction), (1.0, 1.0, 1.0));
    }

    #[test]
    fn two_document_example() {
        let (t1, t2, t3) = (t("a", "b", "c"), t("d", "e", "f"), t("g", "h", "i"));
        let gold = vec![vec![t1.clone()], vec![t1.clone(), t2.clone()]];
        let pred = vec![vec![t1.clone()], vec![t1.clone(), t3.clone()]];
        let prf = triplet_prf(&gold, &pred).unwrap();
        assert!((prf.precision - 0.75).abs() < 1e-15);
        assert!((prf.recall - 0.75).abs() < 1e-15);
        assert!((prf.f1 - 0.75).abs() < 1e-15);
        // unions {t1,t2} vs {t1,t3}
        let o = ontology_prf(&gold, &pred).unwrap();
        assert_eq!((o.precision, o.recall, o.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn conventions() {
        let gold = vec![vec![t("a", "b", "c")]];
        let none = vec![vec![]];
        assert_eq!(triplet_prf(&gold, &none).unwrap(), Prf::new(0.0, 0.0));
        let o = ontology_prf(&gold, &none).unwrap();
        assert_eq!((o.precision, o.recall, o.f1), (0.0, 0.0, 0.0));
        let e = entity_accuracies(&none, &none).unwrap();
        assert_eq!(e.drug, 1.0);
        let half = entity_accuracies(&[vec![t("a", "b", "c")]], &[vec![t("a", "b", "c"), t("b", "b", "c")]]).unwrap();
        assert_eq!(half.drug, 0.5);
        assert!(matches!(triplet_prf(&gold, &[]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn union_counts_duplicates_once() {
        let x = t("a", "b", "c");
        let gold = vec![vec![x.clone()], vec![x.clone()]];
        let pred = vec![vec![t("A", " b", "C")], vec![]];
        let o = ontology_prf(&gold, &pred).unwrap();
        assert_eq!((o.precision, o.recall), (1.0, 1.0));
    }

    #[test]
    fn aggregate_examples() {
        let mk = |f1: f64| {
            let mut r = evaluate(&["d".into()], &[vec![]], &[vec![]], Exec::Sequential).unwrap();
            r.triplet.f1 = f1;
            r
        };
        let a = aggregate_runs(&[mk(0.4), mk(0.6)]).unwrap();
        assert!((a.mean.triplet.f1 - 0.5).abs() < 1e-12);
        assert!((a.std.triplet.f1 - 0.02f64.sqrt()).abs() < 1e-12);
        let one = aggregate_runs(&[mk(0.3)]).unwrap();
        assert!(one.single_run);
        assert_eq!(one.std.triplet.f1, 0.0);
        let same = aggregate_runs(&[mk(0.3), mk(0.3), mk(0.3)]).unwrap();
        assert_eq!(same.std.triplet.f1, 0.0);
    }

    #[test]
    fn min_distance_examples() {
        let mut lex = Lexicons::default();
        lex.drug.insert("aspirin", []);
        lex.target.insert("cox-1", []);
        lex.interaction.insert("inhibitor", []);
        let text = "w0 w1 w2 aspirin w4 w5 w6 w7 w8 w9 cox-1 w11 w12 w13 w14 w15 w16 w17 w18 w19 w20 w21 w22 w23 w24 \
                    w25 w26 w27 w28 w29 w30 w31 w32 w33 w34 w35 w36 w37 w38 w39 cox-1";
        let doc = Document::new("x", "", text);
        let b = EditBudget::default();
        assert_eq!(min_dt_distance(&doc, &t("aspirin", "cox-1", "inhibitor"), &lex, &b), Some(7));
        let absent = Document::new("y", "", "aspirin only");
        assert_eq!(min_dt_distance(&absent, &t("aspirin", "cox-1", "inhibitor"), &lex, &b), None);
    }

    fn arb_triplet() -> impl Strategy<Value = DtiTriplet> {
        (0..3u8, 0..3u8, 0..2u8).prop_map(|(d, tg, i)| t(&format!("d{d}"), &format!("t{tg}"), &format!("i{i}")))
    }

    fn arb_doc() -> impl Strategy<Value = Vec<DtiTriplet>> {
        prop::collection::vec(arb_triplet(), 0..4)
    }

    proptest! {
        #[test]
        fn permutation_invariant(docs in prop::collection::vec((arb_doc(), arb_doc()), 1..6)) {
            let gold: Vec<_> = docs.iter().map(|d| d.0.clone()).collect();
            let pred: Vec<_> = docs.iter().map(|d| d.1.clone()).collect();
            let a = triplet_prf(&gold, &pred).unwrap();
            let rg: Vec<_> = gold.iter().rev().map(|d| d.iter().rev().cloned().collect::<Vec<_>>()).collect();
            let rp: Vec<_> = pred.iter().rev().cloned().collect();
            let b = triplet_prf(&rg, &rp).unwrap();
            prop_assert!((a.f1 - b.f1).abs() < 1e-12);
            prop_assert!((ontology_prf(&gold, &pred).unwrap().f1 - ontology_prf(&rg, &rp).unwrap().f1).abs() < 1e-12);
        }

        #[test]
        fn monotone(gold in arb_doc(), pred in arb_doc(), extra in arb_triplet()) {
            let base = triplet_prf(&[gold.clone()], &[pred.clone()]).unwrap();
            if gold.contains(&extra) {
                let mut more = pred.clone();
                more.push(extra.clone());
                prop_assert!(triplet_prf(&[gold.clone()], &[more]).unwrap().recall >= base.recall);
            } else if pred.contains(&extra) {
                let fewer: Vec<_> = pred.iter().filter(|x| **x != extra).cloned().collect();
                let after = triplet_prf(&[gold.clone()], &[fewer]).unwrap();
                prop_assert!(after.precision >= base.precision);
            }
        }
    }
}
