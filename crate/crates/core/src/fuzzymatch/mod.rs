//! Fuzzy retrieval of entity mentions, match-pattern classification and
//! document/triplet confidence scores.

pub mod distance;
mod filter;

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{is_punctuation, normalize, normalize_text, Document, DtiTriplet, Lexicon, Lexicons, NormMode};
use distance::{levenshtein_chars, levenshtein_within, longest_common_substring};

pub use filter::{example_score, filter_and_split, rank_and_split, score_examples, Splits};

/// Suffixes accepted as inflectional variants of a query regardless of the
/// edit budget.
const VARIANT_SUFFIXES: [&str; 7] = ["s", "es", "ed", "d", "ing", "ion", "ions"];

/// Words that carry no entity meaning on their own.
pub const MEANINGLESS_WORDS: [&str; 10] = [
    "other", "others", "unknown", "none", "various", "several", "some", "multiple", "other/unknown", "n/a",
];

/// Maximum edit distance admitted for a query of a given length:
/// `max(len / divisor, floor)` for queries of at least `min_query_len` chars,
/// zero below.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditBudget {
    pub divisor: usize,
    pub min_query_len: usize,
    pub floor: usize,
}

impl Default for EditBudget {
    fn default() -> Self {
        EditBudget {
            divisor: 8,
            min_query_len: 4,
            floor: 1,
        }
    }
}

impl EditBudget {
    pub fn max_distance(&self, query_chars: usize) -> usize {
        if query_chars < self.min_query_len {
            0
        } else {
            (query_chars / self.divisor.max(1)).max(self.floor)
        }
    }
}

/// A retrieved mention, in char offsets of [`Document::text`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchSpan {
    pub start: usize,
    pub end: usize,
    pub text: String,
    /// The normalized query form (query or synonym) this span matched.
    /// `None` means "compare against the query itself".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched: Option<String>,
}

impl MatchSpan {
    /// A span not tied to any document position, for classifying
    /// hand-picked retrieval results.
    pub fn detached(text: impl Into<String>) -> Self {
        let text = text.into();
        MatchSpan {
            start: 0,
            end: text.chars().count(),
            text,
            matched: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Rule {
    P1,
    P2,
    P3,
    P4,
    P5,
    P6,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MatchClass {
    Negative,
    Positive,
    Reliable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternClass {
    pub class: MatchClass,
    pub rule: Option<Rule>,
}

impl PatternClass {
    pub fn new(rule: Option<Rule>) -> Self {
        let class = match rule {
            Some(Rule::P1 | Rule::P2) => MatchClass::Reliable,
            Some(Rule::P3 | Rule::P4 | Rule::P5) => MatchClass::Positive,
            Some(Rule::P6) | None => MatchClass::Negative,
        };
        PatternClass { class, rule }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchReport {
    pub query: String,
    pub spans: Vec<MatchSpan>,
    pub class: PatternClass,
    pub phi: i32,
}

pub fn phi(class: PatternClass) -> i32 {
    match class.class {
        MatchClass::Reliable => 5,
        MatchClass::Positive => 1,
        MatchClass::Negative => -1,
    }
}

/// True when `word` is `query` plus an inflectional suffix (base-normalized
/// inputs). Exact equality is not a variant.
pub fn is_variant(word: &str, query: &str) -> bool {
    if word.len() <= query.len() || query.is_empty() {
        return false;
    }
    if let Some(rest) = word.strip_prefix(query) {
        if VARIANT_SUFFIXES.contains(&rest) {
            return true;
        }
    }
    if let Some(stem) = query.strip_suffix('e') {
        if let Some(rest) = word.strip_prefix(stem) {
            return matches!(rest, "ing" | "ion" | "ions" | "ed" | "ation");
        }
    }
    if let Some(stem) = query.strip_suffix('y') {
        return word.strip_prefix(stem) == Some("ies");
    }
    false
}

#[derive(Debug, Clone)]
struct Word {
    /// char offsets of the word with surrounding punctuation trimmed
    start: usize,
    end: usize,
}

/// A tokenized document that caches normalized windows across queries.
#[derive(Debug)]
pub struct DocIndex {
    text: String,
    chars: Vec<char>,
    words: Vec<Word>,
    /// `windows[k][a]` = normalized text of words `a..a+k`
    windows: RefCell<HashMap<usize, Vec<Vec<char>>>>,
}

impl DocIndex {
    pub fn new(doc: &Document) -> Self {
        Self::from_text(doc.text())
    }

    pub fn from_text(text: String) -> Self {
        let chars: Vec<char> = text.chars().collect();
        let mut words = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            if chars[i].is_whitespace() {
                i += 1;
                continue;
            }
            let mut j = i;
            while j < chars.len() && !chars[j].is_whitespace() {
                j += 1;
            }
            let (mut s, mut e) = (i, j);
            while s < e && is_punctuation(chars[s]) {
                s += 1;
            }
            while e > s && is_punctuation(chars[e - 1]) {
                e -= 1;
            }
            if s < e {
                words.push(Word { start: s, end: e });
            }
            i = j;
        }
        DocIndex {
            text,
            chars,
            words,
            windows: RefCell::new(HashMap::new()),
        }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    /// Index of the whitespace token containing char offset `pos`.
    pub fn token_index(&self, pos: usize) -> usize {
        let upto = (pos + 1).min(self.chars.len());
        (0..upto)
            .filter(|&i| !self.chars[i].is_whitespace() && (i == 0 || self.chars[i - 1].is_whitespace()))
            .count()
            .saturating_sub(1)
    }

    fn slice(&self, start: usize, end: usize) -> String {
        self.chars[start..end].iter().collect()
    }

    fn with_windows<R>(&self, k: usize, f: impl FnOnce(&[Vec<char>]) -> R) -> R {
        let mut cache = self.windows.borrow_mut();
        let entry = cache.entry(k).or_insert_with(|| {
            if k == 0 || k > self.words.len() {
                return Vec::new();
            }
            (0..=self.words.len() - k)
                .map(|a| {
                    let s = self.slice(self.words[a].start, self.words[a + k - 1].end);
                    normalize(&s).chars().collect()
                })
                .collect()
        });
        f(entry)
    }
}

struct Candidate {
    norm: String,
    chars: Vec<char>,
    loose: String,
    words: usize,
}

/// All maximal non-overlapping mentions of `query` or any synonym in `doc`.
///
/// A window of `n - 1`, `n` or `n + 1` words (n = word count of the query
/// form) matches when it equals the query form up to case and punctuation,
/// is an inflectional variant of it, or lies within the edit budget.
/// Overlaps are resolved greedily by (distance, longer span, earlier start).
pub fn retrieve(query: &str, synonyms: &[String], doc: &DocIndex, budget: &EditBudget) -> Vec<MatchSpan> {
    let mut forms: Vec<String> = Vec::new();
    for s in std::iter::once(query).chain(synonyms.iter().map(String::as_str)) {
        let n = normalize(s);
        if !n.is_empty() && !forms.contains(&n) {
            forms.push(n);
        }
    }
    let candidates: Vec<Candidate> = forms
        .into_iter()
        .map(|norm| Candidate {
            chars: norm.chars().collect(),
            loose: normalize_text(&norm, NormMode::Loose),
            words: norm.split(' ').count(),
            norm,
        })
        .collect();

    // (distance, start, end, candidate index)
    let mut hits: Vec<(usize, usize, usize, usize)> = Vec::new();
    for (ci, cand) in candidates.iter().enumerate() {
        let max = budget.max_distance(cand.chars.len());
        for k in [cand.words.saturating_sub(1), cand.words, cand.words + 1] {
            if k == 0 {
                continue;
            }
            doc.with_windows(k, |windows| {
                for (a, w) in windows.iter().enumerate() {
                    if let Some(d) = window_distance(w, cand, max) {
                        hits.push((d, doc.words[a].start, doc.words[a + k - 1].end, ci));
                    }
                }
            });
        }
    }
    hits.sort_by(|x, y| {
        x.0.cmp(&y.0)
            .then((y.2 - y.1).cmp(&(x.2 - x.1)))
            .then(x.1.cmp(&y.1))
            .then(x.3.cmp(&y.3))
    });
    let mut chosen: Vec<(usize, usize, usize)> = Vec::new();
    for (_, s, e, ci) in hits {
        if chosen.iter().all(|&(cs, ce, _)| e <= cs || s >= ce) {
            chosen.push((s, e, ci));
        }
    }
    chosen.sort();
    chosen
        .into_iter()
        .map(|(s, e, ci)| MatchSpan {
            start: s,
            end: e,
            text: doc.slice(s, e),
            matched: Some(candidates[ci].norm.clone()),
        })
        .collect()
}

fn window_distance(window: &[char], cand: &Candidate, max: usize) -> Option<usize> {
    let len_gap = window.len().abs_diff(cand.chars.len());
    if len_gap <= max {
        if let Some(d) = levenshtein_within(window, &cand.chars, max) {
            return Some(d);
        }
    }
    // variants and punctuation-insensitive equality ignore the budget
    if window.len() > cand.chars.len() && len_gap <= 5 {
        let w: String = window.iter().collect();
        if is_variant(&w, &cand.norm) {
            return Some(levenshtein_chars(window, &cand.chars));
        }
    }
    if len_gap <= 4 {
        let w: String = window.iter().collect();
        if !cand.loose.is_empty() && normalize_text(&w, NormMode::Loose) == cand.loose {
            return Some(levenshtein_chars(window, &cand.chars));
        }
    }
    None
}

fn common_words(a: &str, b: &str) -> usize {
    let aw: std::collections::HashSet<&str> = a.split_whitespace().collect();
    let bw: std::collections::HashSet<&str> = b.split_whitespace().collect();
    aw.intersection(&bw).count()
}

/// Assigns the first satisfied rule in the order P1, P2, P3, P4, P5, P6.
pub fn classify(query: &str, spans: &[MatchSpan]) -> PatternClass {
    if spans.is_empty() {
        return PatternClass::new(None);
    }
    struct Pair {
        r: String,
        q: String,
    }
    let qn = normalize(query);
    let pairs: Vec<Pair> = spans
        .iter()
        .map(|s| Pair {
            r: normalize(&s.text),
            q: s.matched.as_deref().map(normalize).unwrap_or_else(|| qn.clone()),
        })
        .collect();
    let loose = |s: &str| normalize_text(s, NormMode::Loose);

    // P1: identical up to parentheses, case and punctuation
    if pairs.iter().any(|p| loose(&p.r) == loose(&p.q)) {
        return PatternClass::new(Some(Rule::P1));
    }
    // P2: more than 20 characters or at least 3 words in common
    if pairs
        .iter()
        .any(|p| longest_common_substring(&p.r, &p.q) > 20 || common_words(&loose(&p.r), &loose(&p.q)) >= 3)
    {
        return PatternClass::new(Some(Rule::P2));
    }
    // P3: at least two inflectional variants
    if pairs.iter().filter(|p| is_variant(&p.r, &p.q)).count() >= 2 {
        return PatternClass::new(Some(Rule::P3));
    }
    // P4: at least two with >8 chars in common or <=10% differing chars
    let close = pairs
        .iter()
        .filter(|p| {
            let longest = p.r.chars().count().max(p.q.chars().count()).max(1);
            longest_common_substring(&p.r, &p.q) > 8
                || distance::levenshtein(&p.r, &p.q) as f64 / longest as f64 <= 0.1
        })
        .count();
    if close >= 2 {
        return PatternClass::new(Some(Rule::P4));
    }
    if pairs.len() > 3 {
        return PatternClass::new(Some(Rule::P5));
    }
    // P6: every retrieved phrase is short or meaningless
    if pairs
        .iter()
        .all(|p| p.r.chars().count() < 8 || MEANINGLESS_WORDS.contains(&p.r.as_str()))
    {
        return PatternClass::new(Some(Rule::P6));
    }
    PatternClass::new(None)
}

/// Retrieval, classification and score of one query against one document.
pub fn match_query(query: &str, synonyms: &[String], doc: &DocIndex, budget: &EditBudget) -> MatchReport {
    let spans = retrieve(query, synonyms, doc, budget);
    let class = classify(query, &spans);
    MatchReport {
        query: query.to_string(),
        spans,
        class,
        phi: phi(class),
    }
}

pub fn lexicon_synonyms(lex: &Lexicon, name: &str) -> Vec<String> {
    lex.synonyms(name).map(<[String]>::to_vec).unwrap_or_default()
}

/// Sum of the three per-element scores of a triplet against a document.
pub fn triplet_score(doc: &DocIndex, triplet: &DtiTriplet, lexicons: &Lexicons, budget: &EditBudget) -> i32 {
    [
        (&triplet.drug, &lexicons.drug),
        (&triplet.target, &lexicons.target),
        (&triplet.interaction, &lexicons.interaction),
    ]
    .into_iter()
    .map(|(q, lex)| match_query(q, &lexicon_synonyms(lex, q), doc, budget).phi)
    .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(text: &str) -> DocIndex {
        DocIndex::from_text(text.to_string())
    }

    #[test]
    fn budget_policy() {
        let b = EditBudget::default();
        assert_eq!(b.max_distance(3), 0);
        assert_eq!(b.max_distance(4), 1);
        assert_eq!(b.max_distance(9), 1);
        assert_eq!(b.max_distance(16), 2);
    }

    #[test]
    fn variants() {
        assert!(is_variant("inhibitors", "inhibitor"));
        assert!(is_variant("binding", "bind"));
        assert!(is_variant("inhibition", "inhibit"));
        assert!(is_variant("activated", "activate"));
        assert!(is_variant("modulating", "modulate"));
        assert!(!is_variant("inhibitor", "inhibitor"));
        assert!(!is_variant("inhibitory", "inhibitor"));
    }

    #[test]
    fn retrieve_plural_variant() {
        let d = idx("In this study two inhibitors were tested.");
        let spans = retrieve("inhibitor", &[], &d, &EditBudget::default());
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].text, "inhibitors");
        assert_eq!(&d.text()[spans[0].start..spans[0].end], "inhibitors");
    }

    #[test]
    fn retrieve_absent_query() {
        let d = idx("Aspirin irreversibly acetylates a serine residue of the enzyme.");
        assert!(retrieve("ergosterol", &[], &d, &EditBudget::default()).is_empty());
    }

    #[test]
    fn retrieve_through_synonym() {
        let d = idx("We show that aspirin blocks cyclooxygenase-1 in platelets.");
        let spans = retrieve("COX-1", &["cyclooxygenase-1".into()], &d, &EditBudget::default());
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].text, "cyclooxygenase-1");
        assert_eq!(spans[0].matched.as_deref(), Some("cyclooxygenase-1"));
        assert_eq!(classify("COX-1", &spans).rule, Some(Rule::P1));
    }

    #[test]
    fn retrieve_is_case_insensitive_and_trims_punctuation() {
        let d = idx("ASPIRIN, unlike (aspirin).");
        let spans = retrieve("aspirin", &[], &d, &EditBudget::default());
        let texts: Vec<_> = spans.iter().map(|s| s.text.as_str()).collect();
        assert_eq!(texts, ["ASPIRIN", "aspirin"]);
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify("aspirin", &[MatchSpan::detached("Aspirin.")]).rule, Some(Rule::P1));
        let p2 = classify(
            "histamine H3 receptor antagonist",
            &[MatchSpan::detached("histamine H3 receptor antagonists")],
        );
        assert_eq!(p2, PatternClass { class: MatchClass::Reliable, rule: Some(Rule::P2) });
        let p6 = classify("activator", &[MatchSpan::detached("other")]);
        assert_eq!(p6, PatternClass { class: MatchClass::Negative, rule: Some(Rule::P6) });
        let spans: Vec<_> = ["bindings", "Bindings", "bindings", "bindings,"].into_iter().map(MatchSpan::detached).collect();
        assert_eq!(classify("binding", &spans).class, MatchClass::Positive);
        assert_eq!(classify("binding", &spans).rule, Some(Rule::P3));
        assert_eq!(classify("x", &[]), PatternClass { class: MatchClass::Negative, rule: None });
    }

    #[test]
    fn phi_values() {
        assert_eq!(phi(PatternClass::new(Some(Rule::P1))), 5);
        assert_eq!(phi(PatternClass::new(Some(Rule::P4))), 1);
        assert_eq!(phi(PatternClass::new(Some(Rule::P6))), -1);
        assert_eq!(phi(PatternClass::new(None)), -1);
    }

    #[test]
    fn triplet_scores() {
        let mut lex = Lexicons::default();
        lex.drug.insert("aspirin", ["acetylsalicylic acid"]);
        lex.target.insert("cox-1", ["cyclooxygenase-1"]);
        lex.interaction.insert("inhibitor", ["inhibit"]);
        let b = EditBudget::default();
        let all = idx("Aspirin is an inhibitor of COX-1.");
        assert_eq!(triplet_score(&all, &DtiTriplet::new("aspirin", "cox-1", "inhibitor"), &lex, &b), 15);
        // drug reliable, target positive (two variants), interaction negative
        let mixed = idx("Aspirin and the cox-1s and more cox-1ed things.");
        assert_eq!(triplet_score(&mixed, &DtiTriplet::new("aspirin", "cox-1", "activator"), &lex, &b), 5);
        let none = idx("Nothing relevant here at all.");
        assert_eq!(triplet_score(&none, &DtiTriplet::new("aspirin", "cox-1", "inhibitor"), &lex, &b), -3);
    }

    #[test]
    fn token_index_counts_whitespace_tokens() {
        let d = idx("a bb  ccc d");
        assert_eq!(d.token_index(0), 0);
        assert_eq!(d.token_index(2), 1);
        assert_eq!(d.token_index(6), 2);
        assert_eq!(d.token_index(10), 3);
    }
}
