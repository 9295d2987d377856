//! Data model, text normalization and JSON-lines corpus I/O.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::hash::{Hash, Hasher};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which normalization to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Casefold, trim and collapse internal whitespace.
    Base,
    /// `Base`, and additionally drop parentheses and punctuation marks.
    Loose,
}

pub fn normalize_text(raw: &str, mode: NormMode) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut pending_space = false;
    for ch in raw.chars() {
        if ch.is_whitespace() {
            pending_space = !out.is_empty();
            continue;
        }
        if mode == NormMode::Loose && is_punctuation(ch) {
            continue;
        }
        if pending_space {
            out.push(' ');
            pending_space = false;
        }
        out.extend(ch.to_lowercase());
    }
    out
}

/// Shorthand for [`normalize_text`] in base mode.
pub fn normalize(raw: &str) -> String {
    normalize_text(raw, NormMode::Base)
}

pub(crate) fn is_punctuation(ch: char) -> bool {
    ch.is_ascii_punctuation() || matches!(ch, '‘' | '’' | '“' | '”' | '–' | '—' | '…')
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
}

impl Document {
    pub fn new(id: impl Into<String>, title: impl Into<String>, abstract_text: impl Into<String>) -> Self {
        Document {
            id: id.into(),
            title: title.into(),
            abstract_text: abstract_text.into(),
        }
    }

    /// Title and abstract joined into the single text the pipeline works on.
    pub fn text(&self) -> String {
        match (self.title.trim().is_empty(), self.abstract_text.trim().is_empty()) {
            (true, _) => self.abstract_text.clone(),
            (_, true) => self.title.clone(),
            _ => format!("{} {}", self.title, self.abstract_text),
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty document id".into());
        }
        if normalize(&self.title).is_empty() && normalize(&self.abstract_text).is_empty() {
            return Err(format!("document `{}` has empty title and abstract", self.id));
        }
        Ok(())
    }
}

/// Splits text into sentences at `.`, `!` or `?` followed by whitespace or
/// the end of the text.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    for (k, &(i, c)) in chars.iter().enumerate() {
        if matches!(c, '.' | '!' | '?') {
            let next = chars.get(k + 1).map(|&(_, n)| n);
            if next.is_none_or(char::is_whitespace) {
                let s = text[start..i + c.len_utf8()].trim();
                if !s.is_empty() {
                    out.push(s);
                }
                start = i + c.len_utf8();
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// A (drug, target, interaction) triple.
///
/// Equality, hashing and ordering all act on the base-normalized fields, so
/// `("Aspirin", "COX-1", "inhibitor")` equals `(" aspirin", "cox-1 ", "Inhibitor")`.
/// The original surface strings are kept for output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DtiTriplet {
    pub drug: String,
    pub target: String,
    pub interaction: String,
}

/// Normalized identity of a triplet, in (drug, target, interaction) order.
pub type TripletKey = (String, String, String);

impl DtiTriplet {
    pub fn new(drug: impl Into<String>, target: impl Into<String>, interaction: impl Into<String>) -> Self {
        DtiTriplet {
            drug: drug.into(),
            target: target.into(),
            interaction: interaction.into(),
        }
    }

    pub fn key(&self) -> TripletKey {
        (normalize(&self.drug), normalize(&self.target), normalize(&self.interaction))
    }

    /// Checks that no field is empty after normalization.
    pub fn validate(&self) -> Result<()> {
        if normalize(&self.drug).is_empty() {
            return Err(Error::EmptyField("drug"));
        }
        if normalize(&self.target).is_empty() {
            return Err(Error::EmptyField("target"));
        }
        if normalize(&self.interaction).is_empty() {
            return Err(Error::EmptyField("interaction"));
        }
        Ok(())
    }

    /// Number of fields on which two triplets agree under normalized equality.
    pub fn agreement(&self, other: &DtiTriplet) -> usize {
        let (a, b) = (self.key(), other.key());
        usize::from(a.0 == b.0) + usize::from(a.1 == b.1) + usize::from(a.2 == b.2)
    }
}

impl PartialEq for DtiTriplet {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for DtiTriplet {}

impl Hash for DtiTriplet {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.key().hash(state);
    }
}

impl PartialOrd for DtiTriplet {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for DtiTriplet {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

/// Removes duplicates under normalized equality, keeping first occurrences in order.
pub fn dedup_triplets<I: IntoIterator<Item = DtiTriplet>>(triplets: I) -> Vec<DtiTriplet> {
    let mut seen = HashSet::new();
    triplets.into_iter().filter(|t| seen.insert(t.key())).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    #[serde(flatten)]
    pub document: Document,
    #[serde(default)]
    pub triplets: Vec<DtiTriplet>,
}

impl LabeledExample {
    pub fn new(document: Document, triplets: Vec<DtiTriplet>) -> Self {
        LabeledExample {
            document,
            triplets: dedup_triplets(triplets),
        }
    }

    pub fn unlabeled(document: Document) -> Self {
        LabeledExample {
            document,
            triplets: Vec::new(),
        }
    }
}

/// Canonical name → synonyms. Every key and synonym is base-normalized and
/// every canonical name is listed among its own synonyms.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "BTreeMap<String, Vec<String>>", into = "BTreeMap<String, Vec<String>>")]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<String>>,
}

impl From<BTreeMap<String, Vec<String>>> for Lexicon {
    fn from(raw: BTreeMap<String, Vec<String>>) -> Self {
        let mut lex = Lexicon::default();
        for (canonical, synonyms) in raw {
            lex.insert(&canonical, synonyms.iter().map(String::as_str));
        }
        lex
    }
}

impl From<Lexicon> for BTreeMap<String, Vec<String>> {
    fn from(lex: Lexicon) -> Self {
        lex.entries
    }
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds (or extends) an entry. Empty names are ignored.
    pub fn insert<'a>(&mut self, canonical: &str, synonyms: impl IntoIterator<Item = &'a str>) {
        let key = normalize(canonical);
        if key.is_empty() {
            return;
        }
        let list = self.entries.entry(key.clone()).or_default();
        let forms = std::iter::once(key.clone()).chain(synonyms.into_iter().map(normalize));
        for s in forms {
            if !s.is_empty() && !list.contains(&s) {
                list.push(s);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Synonyms (including the name itself) of a canonical name, if present.
    pub fn synonyms(&self, name: &str) -> Option<&[String]> {
        self.entries.get(&normalize(name)).map(Vec::as_slice)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(&normalize(name))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Drug, target and interaction lexicons.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicons {
    pub drug: Lexicon,
    pub target: Lexicon,
    pub interaction: Lexicon,
}

impl Lexicons {
    pub const FILES: [&'static str; 3] = ["drug.json", "target.json", "interaction.json"];

    /// Reads `drug.json`, `target.json` and `interaction.json` from a directory.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        Ok(Lexicons {
            drug: Lexicon::load(&dir.join(Self::FILES[0]))?,
            target: Lexicon::load(&dir.join(Self::FILES[1]))?,
            interaction: Lexicon::load(&dir.join(Self::FILES[2]))?,
        })
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.drug.save(&dir.join(Self::FILES[0]))?;
        self.target.save(&dir.join(Self::FILES[1]))?;
        self.interaction.save(&dir.join(Self::FILES[2]))
    }
}

pub fn load_corpus(path: &Path) -> Result<Vec<LabeledExample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let ex: LabeledExample = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        ex.document.validate().map_err(parse_err)?;
        for t in &ex.triplets {
            t.validate().map_err(|e| parse_err(e.to_string()))?;
        }
        if !ids.insert(ex.document.id.clone()) {
            return Err(Error::DuplicateId(ex.document.id));
        }
        out.push(LabeledExample {
            triplets: dedup_triplets(ex.triplets),
            document: ex.document,
        });
    }
    Ok(out)
}

pub fn save_corpus(examples: &[LabeledExample], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads a corpus and keeps only the documents.
pub fn load_documents(path: &Path) -> Result<Vec<Document>> {
    Ok(load_corpus(path)?.into_iter().map(|e| e.document).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_text("Aspirin  (ASA).", NormMode::Base), "aspirin (asa).");
        assert_eq!(normalize_text("Aspirin (ASA).", NormMode::Loose), "aspirin asa");
        assert_eq!(normalize_text("", NormMode::Base), "");
        assert_eq!(normalize_text("  a \t b\n", NormMode::Base), "a b");
    }

    #[test]
    fn triplet_equality_ignores_case_and_space() {
        let a = DtiTriplet::new("Aspirin", "COX-1", "inhibitor");
        let b = DtiTriplet::new(" aspirin", "cox-1  ", "INHIBITOR");
        assert_eq!(a, b);
        assert_eq!(dedup_triplets(vec![a.clone(), b]).len(), 1);
        assert_eq!(a.agreement(&DtiTriplet::new("aspirin", "x", "inhibitor")), 2);
    }

    #[test]
    fn lexicon_contains_canonical_in_synonyms() {
        let mut lex = Lexicon::new();
        lex.insert("COX-1", ["Cyclooxygenase-1"]);
        assert_eq!(lex.synonyms("cox-1").unwrap(), &["cox-1".to_string(), "cyclooxygenase-1".to_string()]);
        let json = serde_json::to_string(&lex).unwrap();
        let back: Lexicon = serde_json::from_str(&json).unwrap();
        assert_eq!(back, lex);
    }

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn load_two_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "c.jsonl",
            concat!(
                r#"{"id":"1","title":"T","abstract":"A","triplets":[{"drug":"a","target":"b","interaction":"c"}]}"#,
                "\n",
                r#"{"id":"2","title":"T2","abstract":"A2","triplets":[]}"#,
                "\n"
            ),
        );
        let c = load_corpus(&p).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].triplets.len(), 1);
    }

    #[test]
    fn missing_abstract_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "c.jsonl",
            concat!(r#"{"id":"1","title":"T","abstract":"A"}"#, "\n", r#"{"id":"2","title":"T"}"#, "\n"),
        );
        match load_corpus(&p) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("abstract"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "c.jsonl",
            concat!(r#"{"id":"x","title":"T","abstract":"A"}"#, "\n", r#"{"id":"x","title":"U","abstract":"B"}"#),
        );
        assert!(matches!(load_corpus(&p), Err(Error::DuplicateId(id)) if id == "x"));
    }

    #[test]
    fn duplicate_triplet_loaded_once() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "c.jsonl",
            r#"{"id":"1","title":"T","abstract":"A","triplets":[{"drug":"a","target":"b","interaction":"c"},{"drug":"A","target":"b ","interaction":"c"}]}"#,
        );
        assert_eq!(load_corpus(&p).unwrap()[0].triplets.len(), 1);
    }

    #[test]
    fn empty_corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        save_corpus(&[], &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap().len(), 0);
        assert!(load_corpus(&p).unwrap().is_empty());
    }

    #[test]
    fn non_ascii_round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.jsonl");
        let ex = LabeledExample::new(
            Document::new("ü-1", "β-Lactam Ωmega", "Ácido acetilsalicílico inhibe COX‑1 “fuerte”."),
            vec![DtiTriplet::new("Ácido acetilsalicílico", "COX‑1 β", "inhibidor")],
        );
        save_corpus(std::slice::from_ref(&ex), &p).unwrap();
        let back = load_corpus(&p).unwrap();
        assert_eq!(back[0].document.title.as_bytes(), ex.document.title.as_bytes());
        assert_eq!(back[0].document.abstract_text.as_bytes(), ex.document.abstract_text.as_bytes());
        assert_eq!(back[0].triplets[0].drug.as_bytes(), ex.triplets[0].drug.as_bytes());
        assert_eq!(back[0].triplets[0].target.as_bytes(), ex.triplets[0].target.as_bytes());
    }

    fn field() -> impl Strategy<Value = String> {
        "[A-Za-zé0-9 ,()-]{0,3}[A-Za-zé0-9]{1,10}[A-Za-z ().-]{0,6}"
    }

    fn example(i: usize) -> impl Strategy<Value = LabeledExample> {
        (field(), field(), proptest::collection::vec((field(), field(), field()), 0..4)).prop_map(move |(t, a, ts)| {
            LabeledExample::new(
                Document::new(format!("doc-{i}"), t, a),
                ts.into_iter().map(|(d, g, r)| DtiTriplet::new(d, g, r)).collect(),
            )
        })
    }

    fn corpus() -> impl Strategy<Value = Vec<LabeledExample>> {
        (0usize..100).prop_flat_map(|n| (0..n).map(example).collect::<Vec<_>>())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn save_then_load_is_identity(c in corpus()) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("c.jsonl");
            save_corpus(&c, &p).unwrap();
            let back = load_corpus(&p).unwrap();
            prop_assert_eq!(back.len(), c.len());
            for (x, y) in back.iter().zip(&c) {
                prop_assert_eq!(&x.document, &y.document);
                prop_assert_eq!(x.triplets.len(), y.triplets.len());
                for (s, t) in x.triplets.iter().zip(&y.triplets) {
                    prop_assert_eq!(&s.drug, &t.drug);
                    prop_assert_eq!(&s.target, &t.target);
                    prop_assert_eq!(&s.interaction, &t.interaction);
                }
            }
        }

        #[test]
        fn normalization_is_idempotent(s in "\\PC{0,40}") {
            for mode in [NormMode::Base, NormMode::Loose] {
                let once = normalize_text(&s, mode);
                prop_assert_eq!(normalize_text(&once, mode), once.clone());
            }
        }
    }
}
