//! Pseudo-labeling of unlabeled documents: lexicon-based entity spotting,
//! occurrence-count filtration, model-agreement filtration, distance
//! supervision, and merging with labeled data.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{dedup_triplets, Document, DtiTriplet, LabeledExample, Lexicon, Lexicons};
use crate::error::{Error, Result};
use crate::fuzzymatch::{lexicon_synonyms, match_query, retrieve, DocIndex, EditBudget, MatchClass};
use crate::par::{self, Exec};

/// Canonical lexicon names found in one document.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpottedEntities {
    pub drugs: BTreeSet<String>,
    pub targets: BTreeSet<String>,
    pub interactions: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    RuleFilter,
    #[serde(rename = "KD")]
    Kd,
    #[serde(rename = "DS")]
    Ds,
    #[serde(rename = "DSwithInteraction")]
    DsWithInteraction,
}

/// Stored as a corpus line plus a `provenance` field, so pseudo-labeled
/// files also load as ordinary corpora.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabeledExample {
    #[serde(flatten)]
    pub document: Document,
    #[serde(rename = "triplets")]
    pub pseudo_triplets: Vec<DtiTriplet>,
    pub provenance: Provenance,
}

impl PseudoLabeledExample {
    pub fn to_labeled(&self) -> LabeledExample {
        LabeledExample::new(self.document.clone(), self.pseudo_triplets.clone())
    }
}

pub fn save_pseudo(examples: &[PseudoLabeledExample], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_pseudo(path: &Path) -> Result<Vec<PseudoLabeledExample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: PseudoLabeledExample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

fn spot_in(lex: &Lexicon, doc: &DocIndex, budget: &EditBudget) -> BTreeSet<String> {
    lex.iter()
        .filter(|(name, syns)| match_query(name, syns, doc, budget).class.class != MatchClass::Negative)
        .map(|(name, _)| name.to_string())
        .collect()
}

/// Lexicon entries whose mentions in `doc` classify as Reliable or Positive.
pub fn spot_entities(doc: &Document, lexicons: &Lexicons, budget: &EditBudget) -> SpottedEntities {
    let idx = DocIndex::new(doc);
    SpottedEntities {
        drugs: spot_in(&lexicons.drug, &idx, budget),
        targets: spot_in(&lexicons.target, &idx, budget),
        interactions: spot_in(&lexicons.interaction, &idx, budget),
    }
}

/// Every (drug, target, interaction) combination, in sorted order.
pub fn enumerate_triplets(spotted: &SpottedEntities) -> Vec<DtiTriplet> {
    let mut out = Vec::with_capacity(spotted.drugs.len() * spotted.targets.len() * spotted.interactions.len());
    for d in &spotted.drugs {
        for t in &spotted.targets {
            for i in &spotted.interactions {
                out.push(DtiTriplet::new(d.as_str(), t.as_str(), i.as_str()));
            }
        }
    }
    out
}

/// Candidate triplets of every document, each listed once per document.
pub fn candidate_triplets(docs: &[Document], lexicons: &Lexicons, budget: &EditBudget, exec: Exec) -> Vec<Vec<DtiTriplet>> {
    par::map(exec, docs, |d| dedup_triplets(enumerate_triplets(&spot_entities(d, lexicons, budget))))
}

/// How many documents yield each triplet.
pub fn occurrence_counts(candidates: &[Vec<DtiTriplet>]) -> HashMap<DtiTriplet, usize> {
    let mut counts = HashMap::new();
    for ts in candidates {
        for t in ts {
            *counts.entry(t.clone()).or_insert(0) += 1;
        }
    }
    counts
}

/// Keeps the candidate triplets yielded by at least `min_occurrence`
/// documents; documents left without any are dropped.
pub fn rule_filter(
    docs: &[Document],
    lexicons: &Lexicons,
    min_occurrence: usize,
    budget: &EditBudget,
    exec: Exec,
) -> Result<Vec<PseudoLabeledExample>> {
    if min_occurrence == 0 {
        return Err(Error::Config("minimum occurrence must be at least 1".into()));
    }
    if lexicons.drug.is_empty() || lexicons.target.is_empty() || lexicons.interaction.is_empty() {
        return Err(Error::Config("all three lexicons must be non-empty".into()));
    }
    let candidates = candidate_triplets(docs, lexicons, budget, exec);
    let counts = occurrence_counts(&candidates);
    Ok(docs
        .iter()
        .zip(candidates)
        .filter_map(|(doc, ts)| {
            let kept: Vec<DtiTriplet> = ts.into_iter().filter(|t| counts[t] >= min_occurrence).collect();
            (!kept.is_empty()).then(|| PseudoLabeledExample {
                document: doc.clone(),
                pseudo_triplets: kept,
                provenance: Provenance::RuleFilter,
            })
        })
        .collect())
}

/// Keeps the pseudo triplets that agree with some generated triplet of the
/// same document on at least two fields. Documents for which nothing was
/// generated, or where nothing survives, are dropped. Generated triplets
/// are never emitted as labels.
pub fn kd_label(generated: &[Vec<DtiTriplet>], d_semi: &[PseudoLabeledExample]) -> Result<Vec<PseudoLabeledExample>> {
    if generated.len() != d_semi.len() {
        return Err(Error::LengthMismatch {
            what: "generated outputs vs pseudo-labeled documents",
            left: generated.len(),
            right: d_semi.len(),
        });
    }
    Ok(d_semi
        .iter()
        .zip(generated)
        .filter(|(_, gen)| !gen.is_empty())
        .filter_map(|(ex, gen)| {
            let kept: Vec<DtiTriplet> = ex
                .pseudo_triplets
                .iter()
                .filter(|p| gen.iter().any(|g| p.agreement(g) >= 2))
                .cloned()
                .collect();
            (!kept.is_empty()).then(|| PseudoLabeledExample {
                document: ex.document.clone(),
                pseudo_triplets: kept,
                provenance: Provenance::Kd,
            })
        })
        .collect())
}

fn mentioned(name: &str, lex: &Lexicon, doc: &DocIndex, budget: &EditBudget) -> bool {
    !retrieve(name, &lexicon_synonyms(lex, name), doc, budget).is_empty()
}

/// Assigns every known triplet to each unlabeled document that mentions
/// its drug and target (and its interaction, when `require_interaction`).
/// Documents that receive nothing are left out.
pub fn ds_label(
    labeled: &[LabeledExample],
    unlabeled: &[Document],
    lexicons: &Lexicons,
    require_interaction: bool,
    budget: &EditBudget,
    exec: Exec,
) -> Vec<PseudoLabeledExample> {
    let mut known = dedup_triplets(labeled.iter().flat_map(|e| e.triplets.iter().cloned()));
    known.sort();
    let provenance = if require_interaction {
        Provenance::DsWithInteraction
    } else {
        Provenance::Ds
    };
    let labels = par::map(exec, unlabeled, |doc| {
        let idx = DocIndex::new(doc);
        let mut memo: HashMap<(u8, String), bool> = HashMap::new();
        let mut out = Vec::new();
        for t in &known {
            let mut hit = |kind: u8, name: &'_ str, lex: &Lexicon| {
                *memo.entry((kind, name.to_string())).or_insert_with(|| mentioned(name, lex, &idx, budget))
            };
            if hit(0, &t.drug, &lexicons.drug)
                && hit(1, &t.target, &lexicons.target)
                && (!require_interaction || hit(2, &t.interaction, &lexicons.interaction))
            {
                out.push(t.clone());
            }
        }
        out
    });
    unlabeled
        .iter()
        .zip(labels)
        .filter(|(_, ts)| !ts.is_empty())
        .map(|(doc, ts)| PseudoLabeledExample {
            document: doc.clone(),
            pseudo_triplets: ts,
            provenance,
        })
        .collect()
}

/// The labeled corpus repeated `factor` times plus the pseudo-labeled
/// corpus, shuffled under `seed`. Repeated copies get an `~r<k>` id suffix
/// so ids stay unique.
pub fn merge_and_upsample(
    labeled: &[LabeledExample],
    pseudo: &[PseudoLabeledExample],
    factor: usize,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    if factor == 0 {
        return Err(Error::Config("upsample factor must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(labeled.len() * factor + pseudo.len());
    for k in 0..factor {
        for ex in labeled {
            let mut ex = ex.clone();
            if k > 0 {
                ex.document.id = format!("{}~r{k}", ex.document.id);
            }
            out.push(ex);
        }
    }
    out.extend(pseudo.iter().map(PseudoLabeledExample::to_labeled));
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn lex(names: &[&str]) -> Lexicon {
        let mut l = Lexicon::new();
        for n in names {
            l.insert(n, []);
        }
        l
    }

    fn lexicons() -> Lexicons {
        Lexicons {
            drug: lex(&["zolmitrexan", "bravocillin", "quantorex"]),
            target: lex(&["kaxver receptor", "dolphin kinase", "merovin channel"]),
            interaction: lex(&["inhibitor", "agonist", "antagonist"]),
        }
    }

    fn doc(id: &str, text: &str) -> Document {
        Document::new(id, "", text)
    }

    fn t(d: &str, t: &str, i: &str) -> DtiTriplet {
        DtiTriplet::new(d, t, i)
    }

    #[test]
    fn spotting_exact_and_variant_mentions() {
        let mut lx = lexicons();
        lx.drug.insert("Aspirin", []);
        lx.interaction.insert("inhibit", []);
        let d = doc("a", "Aspirin acts on kaxver receptor. Its inhibition was strong, and it inhibits growth.");
        let s = spot_entities(&d, &lx, &EditBudget::default());
        assert!(s.drugs.contains("aspirin"));
        assert!(s.targets.contains("kaxver receptor"));
        assert!(s.interactions.contains("inhibit"));
        assert!(!s.drugs.contains("quantorex"));
    }

    #[test]
    fn enumeration_counts() {
        let mut s = SpottedEntities::default();
        s.drugs.extend(["a".to_string(), "b".to_string()]);
        s.targets.extend(["x".to_string(), "y".to_string(), "z".to_string()]);
        s.interactions.insert("i".to_string());
        assert_eq!(enumerate_triplets(&s).len(), 6);
        s.interactions.clear();
        assert!(enumerate_triplets(&s).is_empty());
    }

    proptest! {
        #[test]
        fn enumeration_is_the_cartesian_product(
            d in proptest::collection::btree_set("[a-e]{1,3}", 0..4),
            tg in proptest::collection::btree_set("[f-j]{1,3}", 0..4),
            i in proptest::collection::btree_set("[k-o]{1,3}", 0..4),
        ) {
            let s = SpottedEntities { drugs: d.clone(), targets: tg.clone(), interactions: i.clone() };
            let got: HashSet<TripletKeyOwned> = enumerate_triplets(&s).iter().map(key).collect();
            let mut want = HashSet::new();
            for a in &d { for b in &tg { for c in &i { want.insert((a.clone(), b.clone(), c.clone())); } } }
            prop_assert_eq!(enumerate_triplets(&s).len(), d.len() * tg.len() * i.len());
            prop_assert_eq!(got, want);
        }
    }

    type TripletKeyOwned = (String, String, String);
    fn key(t: &DtiTriplet) -> TripletKeyOwned {
        (t.drug.clone(), t.target.clone(), t.interaction.clone())
    }

    #[test]
    fn rule_filter_threshold_is_inclusive() {
        let lx = lexicons();
        let mut docs = Vec::new();
        for k in 0..10 {
            docs.push(doc(&format!("g{k}"), "zolmitrexan is an inhibitor of kaxver receptor."));
        }
        for k in 0..9 {
            docs.push(doc(&format!("n{k}"), "bravocillin is an agonist of dolphin kinase."));
        }
        docs.push(doc("none", "Nothing relevant here at all."));
        let out = rule_filter(&docs, &lx, 10, &EditBudget::default(), Exec::Parallel).unwrap();
        assert_eq!(out.len(), 10);
        for ex in &out {
            assert_eq!(ex.pseudo_triplets, vec![t("zolmitrexan", "kaxver receptor", "inhibitor")]);
            assert_eq!(ex.provenance, Provenance::RuleFilter);
        }
        let low = rule_filter(&docs, &lx, 9, &EditBudget::default(), Exec::Sequential).unwrap();
        assert_eq!(low.len(), 19);
        assert!(rule_filter(&docs, &lx, 0, &EditBudget::default(), Exec::Sequential).is_err());
    }

    #[test]
    fn repeated_mentions_count_once_per_document() {
        let lx = lexicons();
        let docs = vec![doc(
            "a",
            "zolmitrexan is an inhibitor of kaxver receptor. zolmitrexan is an inhibitor of kaxver receptor.",
        )];
        let c = occurrence_counts(&candidate_triplets(&docs, &lx, &EditBudget::default(), Exec::Sequential));
        assert_eq!(c[&t("zolmitrexan", "kaxver receptor", "inhibitor")], 1);
    }

    fn semi(id: &str, ts: Vec<DtiTriplet>) -> PseudoLabeledExample {
        PseudoLabeledExample {
            document: doc(id, "text"),
            pseudo_triplets: ts,
            provenance: Provenance::RuleFilter,
        }
    }

    #[test]
    fn kd_two_of_three() {
        let d = vec![
            semi("1", vec![t("a", "b", "c"), t("a", "y", "z")]),
            semi("2", vec![t("a", "b", "c")]),
            semi("3", vec![t("p", "q", "r")]),
        ];
        let gen = vec![vec![t("a", "b", "z")], vec![], vec![t("p", "x", "y")]];
        let out = kd_label(&gen, &d).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].document.id, "1");
        assert_eq!(out[0].pseudo_triplets, vec![t("a", "b", "c"), t("a", "y", "z")]);
        assert_eq!(out[0].provenance, Provenance::Kd);

        let gen = vec![vec![t("a", "b", "q")], vec![t("x", "y", "z")], vec![t("P", "Q", "r")]];
        let out = kd_label(&gen, &d).unwrap();
        let ids: Vec<&str> = out.iter().map(|e| e.document.id.as_str()).collect();
        assert_eq!(ids, ["1", "3"]);
        assert_eq!(out[0].pseudo_triplets, vec![t("a", "b", "c")]);

        assert!(matches!(kd_label(&gen[..2], &d), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn distance_supervision() {
        let lx = lexicons();
        let labeled = vec![LabeledExample::new(
            doc("l", ""),
            vec![t("zolmitrexan", "kaxver receptor", "inhibitor"), t("quantorex", "merovin channel", "agonist")],
        )];
        let pool = vec![
            doc("u1", "zolmitrexan was given; kaxver receptor levels fell."),
            doc("u2", "zolmitrexan is an inhibitor of kaxver receptor."),
            doc("u3", "Unrelated text about nothing."),
        ];
        let b = EditBudget::default();
        let plain = ds_label(&labeled, &pool, &lx, false, &b, Exec::Parallel);
        let strict = ds_label(&labeled, &pool, &lx, true, &b, Exec::Sequential);
        let ids = |v: &[PseudoLabeledExample]| v.iter().map(|e| e.document.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&plain), ["u1", "u2"]);
        assert_eq!(ids(&strict), ["u2"]);
        assert_eq!(plain[0].pseudo_triplets, vec![t("zolmitrexan", "kaxver receptor", "inhibitor")]);
        assert_eq!(strict[0].provenance, Provenance::DsWithInteraction);
    }

    #[test]
    fn merge_counts_and_determinism() {
        let labeled: Vec<LabeledExample> = (0..10)
            .map(|k| LabeledExample::new(doc(&format!("d{k}"), "x"), vec![t("a", "b", "c")]))
            .collect();
        let pseudo: Vec<_> = (0..3).map(|k| semi(&format!("u{k}"), vec![t("a", "b", "c")])).collect();
        let m = merge_and_upsample(&labeled, &pseudo, 5, 7).unwrap();
        assert_eq!(m.len(), 53);
        let ids: HashSet<&str> = m.iter().map(|e| e.document.id.as_str()).collect();
        assert_eq!(ids.len(), 53);
        assert_eq!(m, merge_and_upsample(&labeled, &pseudo, 5, 7).unwrap());
        let one = merge_and_upsample(&labeled, &[], 1, 3).unwrap();
        let mut a: Vec<_> = one.iter().map(|e| e.document.id.clone()).collect();
        a.sort();
        let mut b: Vec<_> = labeled.iter().map(|e| e.document.id.clone()).collect();
        b.sort();
        assert_eq!(a, b);
        assert!(merge_and_upsample(&labeled, &[], 0, 3).is_err());
    }

    #[test]
    fn pseudo_files_round_trip_and_load_as_corpora() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.jsonl");
        let xs = vec![semi("u1", vec![t("a", "b", "c")]), semi("u2", vec![t("d", "e", "f")])];
        save_pseudo(&xs, &p).unwrap();
        assert_eq!(load_pseudo(&p).unwrap(), xs);
        let as_corpus = crate::corpus::load_corpus(&p).unwrap();
        assert_eq!(as_corpus[1], xs[1].to_labeled());
    }
}
