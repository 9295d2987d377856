//! Deterministic synthetic corpora: templated pseudo-abstracts with planted
//! triplets, distractor entities and matching lexicons.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, DtiTriplet, LabeledExample, Lexicons};
use crate::error::{Error, Result};
use crate::fuzzymatch::distance::levenshtein;

/// Interaction types, chosen to be far apart from each other and from
/// every template word.
pub const INTERACTIONS: [&str; 16] = [
    "inhibitor",
    "agonist",
    "antagonist",
    "activator",
    "blocker",
    "modulator",
    "inducer",
    "substrate",
    "binder",
    "suppressor",
    "stimulator",
    "chaperone",
    "cofactor",
    "ligand",
    "potentiator",
    "degrader",
];

const TARGET_KINDS: [&str; 4] = ["kinase", "receptor", "channel", "transporter"];

const ONSETS: [&str; 14] = ["v", "z", "qu", "x", "th", "br", "k", "l", "n", "dr", "f", "gl", "p", "sk"];
const NUCLEI: [&str; 6] = ["a", "e", "i", "o", "u", "y"];
const CODAS: [&str; 8] = ["", "n", "r", "x", "m", "l", "st", "rn"];

const SINGLE: [&str; 4] = [
    "{D} acts as {a} {I} of {T}.",
    "We identified {D} as a selective {I} of {T}.",
    "In cell assays {D} behaved as {a} {I} at {T}.",
    "Binding data show that {D} is a potent {I} of {T}.",
];

/// Three consecutive sentences, one element each.
const SPREAD: [[&str; 3]; 3] = [
    [
        "{D} was administered to the treated group.",
        "Its profile was consistent with {a} {I}.",
        "The response was mediated by {T}.",
    ],
    [
        "Treatment with {D} started on day one.",
        "Pharmacology marked the compound as {a} {I}.",
        "Its main site of action was {T}.",
    ],
    [
        "A cohort received {D} for four weeks.",
        "The compound showed the pattern of {a} {I}.",
        "This pattern was traced to {T}.",
    ],
];

const REPEAT_DRUG: [&str; 2] = ["The effect of {D} was dose dependent.", "Plasma levels of {D} were stable."];
const REPEAT_TARGET: [&str; 2] = ["Expression of {T} was unchanged in controls.", "Mutations in {T} abolished the effect."];
const REPEAT_INTERACTION: [&str; 2] = ["Other {I}s were not examined.", "Known {I}s served as references."];
const DISTRACT_DRUG: [&str; 2] = ["Patients also received {X}.", "{X} was given to the control group."];
const DISTRACT_TARGET: [&str; 2] = ["Levels of {X} were also measured.", "No change in {X} was seen."];
const FILLER: [&str; 4] = [
    "The study enrolled {N} participants.",
    "Results were consistent across replicates.",
    "Follow up lasted {N} days.",
    "Statistical analysis used standard methods.",
];
const TITLES: [&str; 3] = ["Effects of {D} on {T}", "{D} and {T} in a model system", "A study of {D} at {T}"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub seed: u64,
    pub n_docs: usize,
    /// Inclusive range of gold triplets per labeled document.
    pub triplets_per_doc: (usize, usize),
    pub n_distractor_entities: usize,
    pub drug_lexicon_size: usize,
    pub target_lexicon_size: usize,
    pub interaction_lexicon_size: usize,
    /// Number of distinct gold triplets documents draw from.
    pub kb_size: usize,
    /// Spread the elements of one gold triplet per document over three sentences.
    pub multi_sentence: bool,
    /// Share of documents emitted without labels.
    pub unlabeled_fraction: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 1,
            n_docs: 400,
            triplets_per_doc: (1, 2),
            n_distractor_entities: 12,
            drug_lexicon_size: 16,
            target_lexicon_size: 16,
            interaction_lexicon_size: 8,
            kb_size: 24,
            multi_sentence: true,
            unlabeled_fraction: 0.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_docs", self.n_docs),
            ("drug_lexicon_size", self.drug_lexicon_size),
            ("target_lexicon_size", self.target_lexicon_size),
            ("interaction_lexicon_size", self.interaction_lexicon_size),
            ("kb_size", self.kb_size),
            ("triplets_per_doc.min", self.triplets_per_doc.0),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        let (lo, hi) = self.triplets_per_doc;
        if lo > hi {
            return Err(Error::Config(format!("triplets_per_doc range {lo}..={hi} is empty")));
        }
        if !(0.0..=1.0).contains(&self.unlabeled_fraction) {
            return Err(Error::Config("unlabeled_fraction must lie in [0, 1]".into()));
        }
        if self.interaction_lexicon_size > INTERACTIONS.len() {
            return Err(Error::Config(format!(
                "at most {} interaction types are available, {} requested",
                INTERACTIONS.len(),
                self.interaction_lexicon_size
            )));
        }
        let combos = self.drug_lexicon_size * self.target_lexicon_size * self.interaction_lexicon_size;
        if self.kb_size > combos {
            return Err(Error::Config(format!(
                "kb_size {} exceeds the {combos} distinct triplets the lexicons allow",
                self.kb_size
            )));
        }
        if hi > self.kb_size {
            return Err(Error::Config(format!(
                "{hi} distinct triplets per document requested but kb_size is {}",
                self.kb_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generated {
    pub labeled: Vec<LabeledExample>,
    pub unlabeled: Vec<Document>,
    pub lexicons: Lexicons,
    /// Gold triplets of every generated document, including unlabeled ones.
    pub hidden_gold: Vec<LabeledExample>,
    pub knowledge_base: Vec<DtiTriplet>,
    pub distractors: Vec<String>,
}

/// Every word that can appear in generated text outside entity slots.
pub fn template_words() -> BTreeSet<String> {
    let all = SINGLE
        .iter()
        .chain(SPREAD.iter().flatten())
        .chain(&REPEAT_DRUG)
        .chain(&REPEAT_TARGET)
        .chain(&REPEAT_INTERACTION)
        .chain(&DISTRACT_DRUG)
        .chain(&DISTRACT_TARGET)
        .chain(&FILLER)
        .chain(&TITLES);
    all.flat_map(|t| t.split_whitespace())
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric() && c != '{' && c != '}').to_lowercase())
        .filter(|w| !w.contains('{') && !w.is_empty())
        .chain(["a", "an"].map(String::from))
        .collect()
}

/// Names at edit distance of at least 3 from each other, from every
/// template word and from everything in `taken`.
struct NameSource<'a> {
    rng: &'a mut ChaCha8Rng,
    taken: Vec<String>,
}

impl NameSource<'_> {
    fn far(&self, cand: &str) -> bool {
        cand.split_whitespace().all(|w| w.len() >= 4)
            && self.taken.iter().all(|t| {
                let head = |s: &str| s.split_whitespace().next().unwrap_or("").to_string();
                levenshtein(cand, t) >= 3 && levenshtein(&head(cand), &head(t)) >= 3
            })
    }

    fn word(&mut self, syllables: usize) -> String {
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS.choose(self.rng).unwrap());
            w.push_str(NUCLEI.choose(self.rng).unwrap());
            w.push_str(CODAS.choose(self.rng).unwrap());
        }
        w
    }

    fn fresh(&mut self, make: impl Fn(&mut Self) -> String) -> Result<String> {
        for _ in 0..10_000 {
            let cand = make(self);
            if self.far(&cand) {
                self.taken.push(cand.clone());
                return Ok(cand);
            }
        }
        Err(Error::Config("could not generate enough distinct entity names".into()))
    }

    fn drug(&mut self) -> Result<String> {
        self.fresh(|s| s.word(3))
    }

    fn target(&mut self) -> Result<String> {
        self.fresh(|s| {
            let kind = *TARGET_KINDS.choose(s.rng).unwrap();
            format!("{} {kind}", s.word(2))
        })
    }

    fn code(&mut self) -> Result<String> {
        self.fresh(|s| {
            let a = (b'a' + s.rng.gen_range(0..26)) as char;
            let b = (b'a' + s.rng.gen_range(0..26)) as char;
            format!("{a}{b}-{}", s.rng.gen_range(100..1000))
        })
    }
}

fn article(word: &str) -> &'static str {
    if word.starts_with(['a', 'e', 'i', 'o', 'u']) {
        "an"
    } else {
        "a"
    }
}

fn fill(template: &str, t: Option<&DtiTriplet>, drug: Option<&str>, x: Option<&str>, rng: &mut ChaCha8Rng) -> String {
    let mut s = template.to_string();
    if let Some(t) = t {
        s = s
            .replace("{D}", drug.unwrap_or(&t.drug))
            .replace("{a}", article(&t.interaction))
            .replace("{I}", &t.interaction)
            .replace("{T}", &t.target);
    }
    if let Some(x) = x {
        s = s.replace("{X}", x);
    }
    if s.contains("{N}") {
        s = s.replace("{N}", &rng.gen_range(12..400).to_string());
    }
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => s,
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &'a [&'a str]) -> &'a str {
    xs.choose(rng).unwrap()
}

/// Generates a corpus. Identical configurations give identical output.
pub fn generate(config: &GenConfig) -> Result<Generated> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut taken: Vec<String> = template_words().into_iter().collect();
    taken.extend(INTERACTIONS.iter().map(|s| s.to_string()));
    let mut names = NameSource { rng: &mut rng, taken };

    let drugs: Vec<String> = (0..config.drug_lexicon_size).map(|_| names.drug()).collect::<Result<_>>()?;
    let targets: Vec<String> = (0..config.target_lexicon_size).map(|_| names.target()).collect::<Result<_>>()?;
    let n_dd = config.n_distractor_entities.div_ceil(2);
    let n_dt = config.n_distractor_entities - n_dd;
    let distractor_drugs: Vec<String> = (0..n_dd).map(|_| names.drug()).collect::<Result<_>>()?;
    let distractor_targets: Vec<String> = (0..n_dt).map(|_| names.target()).collect::<Result<_>>()?;
    // about half the gold drugs carry a code-name synonym
    let mut codes: Vec<Option<String>> = Vec::new();
    for _ in &drugs {
        let has = names.rng.gen_bool(0.5);
        codes.push(if has { Some(names.code()?) } else { None });
    }
    let mut interactions: Vec<String> = INTERACTIONS.iter().map(|s| s.to_string()).collect();
    interactions.shuffle(&mut rng);
    interactions.truncate(config.interaction_lexicon_size);

    let mut lexicons = Lexicons::default();
    for (d, code) in drugs.iter().zip(&codes) {
        lexicons.drug.insert(d, code.as_deref());
    }
    for d in &distractor_drugs {
        lexicons.drug.insert(d, []);
    }
    for t in targets.iter().chain(&distractor_targets) {
        lexicons.target.insert(t, []);
    }
    for i in &interactions {
        lexicons.interaction.insert(i, []);
    }

    // knowledge base: every drug and target used at least once where possible
    let mut kb: Vec<DtiTriplet> = Vec::new();
    let mut seen = BTreeSet::new();
    let mut k = 0usize;
    while kb.len() < config.kb_size {
        let (d, t, i) = if k < drugs.len().max(targets.len()) {
            (
                k % drugs.len(),
                k % targets.len(),
                rng.gen_range(0..interactions.len()),
            )
        } else {
            (
                rng.gen_range(0..drugs.len()),
                rng.gen_range(0..targets.len()),
                rng.gen_range(0..interactions.len()),
            )
        };
        k += 1;
        if seen.insert((d, t, i)) {
            kb.push(DtiTriplet::new(&drugs[d], &targets[t], &interactions[i]));
        }
    }
    let code_of = |drug: &str| drugs.iter().position(|d| d == drug).and_then(|p| codes[p].clone());

    let n_unlabeled = (config.n_docs as f64 * config.unlabeled_fraction).round() as usize;
    let n_labeled = config.n_docs - n_unlabeled;
    let mut hidden_gold = Vec::with_capacity(config.n_docs);
    for doc_i in 0..config.n_docs {
        let n = rng.gen_range(config.triplets_per_doc.0..=config.triplets_per_doc.1);
        let mut gold: Vec<DtiTriplet> = kb.choose_multiple(&mut rng, n).cloned().collect();
        gold.sort();

        let mut blocks: Vec<Vec<String>> = Vec::new();
        for (j, t) in gold.iter().enumerate() {
            if config.multi_sentence && j == 0 {
                let tpl = SPREAD.choose(&mut rng).unwrap();
                blocks.push(tpl.iter().map(|s| fill(s, Some(t), None, None, &mut rng)).collect());
            } else {
                blocks.push(vec![fill(pick(&mut rng, &SINGLE), Some(t), None, None, &mut rng)]);
            }
            // optional extra mentions: synonym or variant forms
            if rng.gen_bool(0.5) {
                let alias = code_of(&t.drug);
                let d = if rng.gen_bool(0.5) { alias.as_deref() } else { None };
                blocks.push(vec![fill(pick(&mut rng, &REPEAT_DRUG), Some(t), d, None, &mut rng)]);
            }
            if rng.gen_bool(0.3) {
                blocks.push(vec![fill(pick(&mut rng, &REPEAT_TARGET), Some(t), None, None, &mut rng)]);
            }
            if rng.gen_bool(0.3) {
                blocks.push(vec![fill(pick(&mut rng, &REPEAT_INTERACTION), Some(t), None, None, &mut rng)]);
            }
        }
        if config.n_distractor_entities > 0 {
            for _ in 0..rng.gen_range(1..=2) {
                let use_drug = distractor_targets.is_empty() || (!distractor_drugs.is_empty() && rng.gen_bool(0.5));
                let (pool, tpls): (&[String], &[&str]) = if use_drug {
                    (&distractor_drugs, &DISTRACT_DRUG)
                } else {
                    (&distractor_targets, &DISTRACT_TARGET)
                };
                let x = pool.choose(&mut rng).unwrap();
                blocks.push(vec![fill(pick(&mut rng, tpls), None, None, Some(x), &mut rng)]);
            }
        }
        if rng.gen_bool(0.5) {
            blocks.push(vec![fill(pick(&mut rng, &FILLER), None, None, None, &mut rng)]);
        }
        blocks.shuffle(&mut rng);
        let abstract_text = blocks.concat().join(" ");
        let title = fill(pick(&mut rng, &TITLES), Some(&gold[0]), None, None, &mut rng);
        let id = if doc_i < n_labeled {
            format!("d{doc_i:05}")
        } else {
            format!("u{:05}", doc_i - n_labeled)
        };
        hidden_gold.push(LabeledExample::new(Document::new(id, title, abstract_text), gold));
    }
    let labeled = hidden_gold[..n_labeled].to_vec();
    let unlabeled = hidden_gold[n_labeled..].iter().map(|e| e.document.clone()).collect();
    let mut distractors = distractor_drugs;
    distractors.extend(distractor_targets);
    Ok(Generated {
        labeled,
        unlabeled,
        lexicons,
        hidden_gold,
        knowledge_base: kb,
        distractors,
    })
}
