//! Motion-phrase augmentation.
//!
//! A lexicon-driven chunker pulls the motion verb phrase out of a caption
//! (`"a man running on the street"` → `"running on the street"`). The phrase
//! is always a verbatim contiguous slice of the caption. Augmented
//! (image, phrase) pairs are added next to the originals, never in place of
//! them, and only for samples that pass the ambiguity filter.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Caption {
    pub tokens: Vec<String>,
    pub raw: String,
}

impl Caption {
    /// Whitespace tokenisation of lowercase text.
    pub fn parse(raw: &str) -> Self {
        let tokens: Vec<String> = raw.split_whitespace().map(|t| t.to_lowercase()).collect();
        Caption {
            raw: tokens.join(" "),
            tokens,
        }
    }

    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Self {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        Caption {
            raw: tokens.join(" "),
            tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl fmt::Display for Caption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

/// A motion phrase and the half-open token span it was cut from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotionPhrase {
    pub tokens: Vec<String>,
    pub span: (usize, usize),
}

impl MotionPhrase {
    pub fn to_caption(&self) -> Caption {
        Caption::from_tokens(self.tokens.iter().cloned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pos {
    Verb,
    Noun,
    Adjective,
    Preposition,
    Determiner,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionClass {
    Active,
    Passive,
    Stative,
    NonMotion,
}

impl MotionClass {
    pub fn is_motion(self) -> bool {
        matches!(self, MotionClass::Active | MotionClass::Passive)
    }
}

macro_rules! str_enum {
    ($ty:ident { $($variant:ident => $name:literal),* $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $name),* })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)*
                    other => Err(Error::InvalidData(format!(
                        concat!("unknown ", stringify!($ty), " `{}`"), other
                    ))),
                }
            }
        }
    };
}

str_enum!(Pos {
    Verb => "verb",
    Noun => "noun",
    Adjective => "adjective",
    Preposition => "preposition",
    Determiner => "determiner",
    Other => "other",
});

str_enum!(MotionClass {
    Active => "active",
    Passive => "passive",
    Stative => "stative",
    NonMotion => "non-motion",
});

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub lemma: String,
    pub pos: Pos,
    pub motion_class: MotionClass,
}

impl LexiconEntry {
    pub fn is_motion_verb(&self) -> bool {
        self.pos == Pos::Verb && self.motion_class.is_motion()
    }
}

/// One entry per token, ordered by lemma.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Lexicon {
    entries: BTreeMap<String, LexiconEntry>,
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an entry; a lemma may only be defined once.
    pub fn insert(&mut self, lemma: &str, pos: Pos, motion_class: MotionClass) -> Result<()> {
        if self.entries.contains_key(lemma) {
            return Err(Error::InvalidData(format!("duplicate lexicon entry `{lemma}`")));
        }
        self.entries.insert(
            lemma.to_string(),
            LexiconEntry {
                lemma: lemma.to_string(),
                pos,
                motion_class,
            },
        );
        Ok(())
    }

    pub fn get(&self, token: &str) -> Option<&LexiconEntry> {
        self.entries.get(token)
    }

    pub fn lookup(&self, token: &str) -> Result<&LexiconEntry> {
        self.get(token).ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &LexiconEntry> {
        self.entries.values()
    }

    /// Motion-verb lemmas in lexicographic order.
    pub fn motion_verbs(&self) -> Vec<&str> {
        self.entries
            .values()
            .filter(|e| e.is_motion_verb())
            .map(|e| e.lemma.as_str())
            .collect()
    }

    /// Parses `lemma<TAB>pos<TAB>motion_class` lines. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut lex = Lexicon::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::InvalidData(format!(
                    "lexicon line {}: expected 3 tab-separated fields, found {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            lex.insert(fields[0], fields[1].parse()?, fields[2].parse()?)?;
        }
        Ok(lex)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("# lemma\tpos\tmotion_class\n");
        for e in self.entries.values() {
            out.push_str(&format!("{}\t{}\t{}\n", e.lemma, e.pos, e.motion_class));
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_tsv(&std::fs::read_to_string(path)?)
    }

    /// A small English lexicon covering the synthetic template grammar and
    /// a handful of free-text referring expressions.
    pub fn builtin() -> Self {
        use MotionClass::*;
        use Pos::*;
        let mut lex = Lexicon::new();
        let groups: &[(&[&str], Pos, MotionClass)] = &[
            (&["a", "an", "the", "this", "that", "its", "his", "her", "their"], Determiner, NonMotion),
            (
                &["in", "on", "over", "under", "with", "at", "near", "of", "to", "from", "behind", "into", "across", "up", "down", "around"],
                Preposition,
                NonMotion,
            ),
            (
                &[
                    "person", "woman", "man", "boy", "girl", "dog", "cat", "car", "ball", "bike", "horse", "bird", "shirt",
                    "jacket", "street", "table", "fence", "shoes", "tricks", "bench", "cup", "grass", "road", "water", "frisbee",
                ],
                Noun,
                NonMotion,
            ),
            (
                &["red", "blue", "green", "orange", "yellow", "white", "black", "small", "large", "tall", "left", "right"],
                Adjective,
                NonMotion,
            ),
            (
                &[
                    "running", "jumping", "walking", "bending", "bending-over", "doing", "touching", "throwing", "catching",
                    "riding", "holding", "sitting", "standing", "lying", "swimming", "flying", "rolling", "turning", "crossing",
                ],
                Verb,
                Active,
            ),
            (&["placed", "parked", "tied", "stacked", "hung"], Verb, Passive),
            (&["is", "are", "was", "has", "wearing", "looks"], Verb, Stative),
            (&["and", "who", "which", "while", "very"], Other, NonMotion),
        ];
        for (words, pos, class) in groups {
            for w in *words {
                lex.insert(w, *pos, *class).expect("builtin lexicon has unique lemmas");
            }
        }
        lex
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ChunkState {
    AfterVerb,
    AfterPrep,
    InNounPhrase,
    NounPhraseDone,
}

impl ChunkState {
    fn next(self, pos: Pos) -> Option<ChunkState> {
        use ChunkState::*;
        match (self, pos) {
            (AfterVerb | AfterPrep | NounPhraseDone, Pos::Preposition) => Some(AfterPrep),
            (AfterVerb | AfterPrep, Pos::Determiner | Pos::Adjective) => Some(InNounPhrase),
            (InNounPhrase, Pos::Adjective) => Some(InNounPhrase),
            (AfterVerb | AfterPrep | InNounPhrase | NounPhraseDone, Pos::Noun) => Some(NounPhraseDone),
            _ => None,
        }
    }

    /// A phrase may end here without leaving a dangling determiner or adjective.
    fn is_complete(self) -> bool {
        !matches!(self, ChunkState::InNounPhrase)
    }
}

/// Extracts the motion phrase of `caption`: starting at the first motion
/// verb, it extends right over objects and prepositional complements and
/// stops at a determiner opening a new non-complement noun phrase, at any
/// other word class that cannot continue the phrase, or at the end.
pub fn extract_motion_phrase(caption: &Caption, lexicon: &Lexicon) -> Result<Option<MotionPhrase>> {
    let entries: Vec<&LexiconEntry> = caption.tokens.iter().map(|t| lexicon.lookup(t)).collect::<Result<_>>()?;
    let Some(start) = entries.iter().position(|e| e.is_motion_verb()) else {
        return Ok(None);
    };
    let mut state = ChunkState::AfterVerb;
    let mut end = start + 1;
    for (k, e) in entries.iter().enumerate().skip(start + 1) {
        match state.next(e.pos) {
            Some(next) => {
                state = next;
                if state.is_complete() {
                    end = k + 1;
                }
            }
            None => break,
        }
    }
    Ok(Some(MotionPhrase {
        tokens: caption.tokens[start..end].to_vec(),
        span: (start, end),
    }))
}

/// Ambiguity pre-filter strictness. `ExcludeAbove(k)` keeps a sample only
/// if its target's category appears at most `k` times in the scene.
/// Serialized as `"none"` or `"exclude>K"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AmbiguityFilter {
    NoFiltering,
    ExcludeAbove(usize),
}

impl Default for AmbiguityFilter {
    fn default() -> Self {
        AmbiguityFilter::ExcludeAbove(1)
    }
}

impl AmbiguityFilter {
    /// Threshold `k` of "exclude > k", `None` when filtering is off.
    pub fn threshold(self) -> Option<usize> {
        match self {
            AmbiguityFilter::NoFiltering => None,
            AmbiguityFilter::ExcludeAbove(k) => Some(k),
        }
    }

    pub fn exclude_above(k: usize) -> Self {
        AmbiguityFilter::ExcludeAbove(k)
    }
}

impl fmt::Display for AmbiguityFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.threshold() {
            None => write!(f, "none"),
            Some(k) => write!(f, "exclude>{k}"),
        }
    }
}

impl FromStr for AmbiguityFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "none" {
            return Ok(AmbiguityFilter::NoFiltering);
        }
        s.strip_prefix("exclude>")
            .and_then(|k| k.parse().ok())
            .filter(|&k| k >= 1)
            .map(AmbiguityFilter::ExcludeAbove)
            .ok_or_else(|| Error::config("ambiguity_filter", format!("expected `none` or `exclude>K` with K >= 1, got `{s}`")))
    }
}

impl Serialize for AmbiguityFilter {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for AmbiguityFilter {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// `true` when the sample may be augmented under `filter`.
pub fn ambiguity_filter(target_category: &str, category_counts: &BTreeMap<String, usize>, filter: AmbiguityFilter) -> bool {
    match filter.threshold() {
        None => true,
        Some(k) => category_counts.get(target_category).copied().unwrap_or(0) <= k,
    }
}

/// One line of a dataset annotation file (JSON Lines).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub sample_id: String,
    pub caption: String,
    pub target_category: String,
    pub category_counts: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_span: Option<(usize, usize)>,
    #[serde(default)]
    pub is_augmented: bool,
}

pub fn read_annotations(text: &str) -> Result<Vec<AnnotationRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn write_annotations(records: &[AnnotationRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Every original record, each followed by its motion-phrase twin when the
/// record passes the ambiguity filter and contains a motion verb.
pub fn make_augmented_pairs(
    records: &[AnnotationRecord],
    lexicon: &Lexicon,
    filter: AmbiguityFilter,
) -> Result<Vec<AnnotationRecord>> {
    let mut out = Vec::with_capacity(records.len() * 2);
    for r in records {
        out.push(r.clone());
        if r.is_augmented || !ambiguity_filter(&r.target_category, &r.category_counts, filter) {
            continue;
        }
        let caption = Caption::parse(&r.caption);
        if let Some(phrase) = extract_motion_phrase(&caption, lexicon)? {
            out.push(AnnotationRecord {
                sample_id: format!("{}#aug", r.sample_id),
                caption: phrase.tokens.join(" "),
                target_category: r.target_category.clone(),
                category_counts: r.category_counts.clone(),
                source_span: Some(phrase.span),
                is_augmented: true,
            });
        }
    }
    Ok(out)
}

/// Replaces the first motion verb with a uniformly drawn different motion
/// verb from `candidates` (all lexicon motion verbs when `None`).
pub fn verb_substitute_negative<R: Rng + ?Sized>(
    caption: &Caption,
    lexicon: &Lexicon,
    candidates: Option<&[String]>,
    rng: &mut R,
) -> Result<Caption> {
    let mut position = None;
    for (i, t) in caption.tokens.iter().enumerate() {
        if lexicon.lookup(t)?.is_motion_verb() {
            position = Some(i);
            break;
        }
    }
    let i = position.ok_or(Error::NoVerb)?;
    let current = &caption.tokens[i];
    let pool: Vec<&str> = match candidates {
        Some(c) => c.iter().map(String::as_str).collect(),
        None => lexicon.motion_verbs(),
    };
    let choices: Vec<&str> = pool.into_iter().filter(|v| v != current).collect();
    if choices.is_empty() {
        return Err(Error::NoVerb);
    }
    let pick = choices[rng.random_range(0..choices.len())];
    let mut tokens = caption.tokens.clone();
    tokens[i] = pick.to_string();
    Ok(Caption::from_tokens(tokens))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn phrase(text: &str) -> Option<String> {
        extract_motion_phrase(&Caption::parse(text), &Lexicon::builtin())
            .unwrap()
            .map(|p| p.tokens.join(" "))
    }

    #[test]
    fn extraction_examples() {
        assert_eq!(phrase("a woman in orange shirt bending over").as_deref(), Some("bending over"));
        assert_eq!(phrase("the red ball"), None);
        assert_eq!(phrase("a man running on the street").as_deref(), Some("running on the street"));
        assert_eq!(phrase("a cup placed on the table").as_deref(), Some("placed on the table"));
        assert_eq!(phrase("a boy doing tricks").as_deref(), Some("doing tricks"));
        assert_eq!(phrase("the person that is running").as_deref(), Some("running"));
        assert_eq!(phrase("the orange person bending-over").as_deref(), Some("bending-over"));
        assert_eq!(phrase("a woman wearing a red shirt"), None);
    }

    #[test]
    fn extraction_stops_at_new_noun_phrase() {
        // "the dog" does not attach to the completed object "ball"
        assert_eq!(phrase("a man throwing ball the dog").as_deref(), Some("throwing ball"));
        assert_eq!(phrase("a man running and jumping").as_deref(), Some("running"));
        // dangling determiner is trimmed
        assert_eq!(phrase("a man holding the").as_deref(), Some("holding"));
    }

    #[test]
    fn extraction_unknown_token() {
        let r = extract_motion_phrase(&Caption::parse("a zebra galloping"), &Lexicon::builtin());
        assert!(matches!(r, Err(Error::UnknownToken(_))));
    }

    #[test]
    fn lexicon_tsv_round_trip() {
        let lex = Lexicon::builtin();
        let back = Lexicon::parse_tsv(&lex.to_tsv()).unwrap();
        assert_eq!(back, lex);
        assert!(Lexicon::parse_tsv("run\tverb\n").is_err());
        assert!(Lexicon::parse_tsv("run\tverb\tactive\nrun\tverb\tactive\n").is_err());
        assert!(Lexicon::parse_tsv("run\tverbish\tactive\n").is_err());
    }

    fn counts(pairs: &[(&str, usize)]) -> BTreeMap<String, usize> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn ambiguity_examples() {
        let one = counts(&[("person", 1), ("dog", 2)]);
        assert!(ambiguity_filter("person", &one, AmbiguityFilter::exclude_above(1)));
        let two = counts(&[("person", 2)]);
        assert!(!ambiguity_filter("person", &two, AmbiguityFilter::exclude_above(1)));
        let three = counts(&[("person", 3)]);
        assert!(ambiguity_filter("person", &three, AmbiguityFilter::exclude_above(3)));
        assert!(!ambiguity_filter("person", &three, AmbiguityFilter::exclude_above(2)));
        assert!(ambiguity_filter("person", &three, AmbiguityFilter::NoFiltering));
    }

    #[test]
    fn filter_setting_parse() {
        assert_eq!("none".parse::<AmbiguityFilter>().unwrap(), AmbiguityFilter::NoFiltering);
        assert_eq!("exclude>2".parse::<AmbiguityFilter>().unwrap().threshold(), Some(2));
        assert!("exclude>0".parse::<AmbiguityFilter>().is_err());
        assert!("loose".parse::<AmbiguityFilter>().is_err());
    }

    fn record(id: &str, caption: &str, cat: &str, n: usize) -> AnnotationRecord {
        AnnotationRecord {
            sample_id: id.into(),
            caption: caption.into(),
            target_category: cat.into(),
            category_counts: counts(&[(cat, n)]),
            source_span: None,
            is_augmented: false,
        }
    }

    #[test]
    fn augmentation_without_verbs_is_identity() {
        let recs = vec![record("0", "the red ball", "ball", 1), record("1", "the blue car", "car", 1)];
        let out = make_augmented_pairs(&recs, &Lexicon::builtin(), AmbiguityFilter::exclude_above(1)).unwrap();
        assert_eq!(out, recs);
    }

    #[test]
    fn augmentation_counts_and_substrings() {
        let recs = vec![
            record("0", "the red person running", "person", 1),
            record("1", "the red ball", "ball", 1),
            record("2", "the blue dog jumping over the fence", "dog", 2),
            record("3", "a man running on the street", "man", 1),
        ];
        let out = make_augmented_pairs(&recs, &Lexicon::builtin(), AmbiguityFilter::exclude_above(1)).unwrap();
        assert_eq!(out.len(), 6);
        for r in out.iter().filter(|r| r.is_augmented) {
            let src = recs.iter().find(|s| r.sample_id.starts_with(&s.sample_id)).unwrap();
            assert!(src.caption.contains(&r.caption));
            let (a, b) = r.source_span.unwrap();
            assert_eq!(Caption::parse(&src.caption).tokens[a..b].join(" "), r.caption);
        }
        let loose = make_augmented_pairs(&recs, &Lexicon::builtin(), AmbiguityFilter::NoFiltering).unwrap();
        assert_eq!(loose.len(), 7);
        let text = write_annotations(&out).unwrap();
        assert_eq!(read_annotations(&text).unwrap(), out);
    }

    #[test]
    fn verb_substitution_two_verb_lexicon() {
        let mut lex = Lexicon::new();
        lex.insert("man", Pos::Noun, MotionClass::NonMotion).unwrap();
        lex.insert("running", Pos::Verb, MotionClass::Active).unwrap();
        lex.insert("jumping", Pos::Verb, MotionClass::Active).unwrap();
        let cap = Caption::parse("man running");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let out = verb_substitute_negative(&cap, &lex, None, &mut rng).unwrap();
        assert_eq!(out.raw, "man jumping");
        let diff = cap.tokens.iter().zip(&out.tokens).filter(|(a, b)| a != b).count();
        assert_eq!(diff, 1);
    }

    #[test]
    fn verb_substitution_deterministic_and_errors() {
        let lex = Lexicon::builtin();
        let cap = Caption::parse("the red person running on the street");
        let a = verb_substitute_negative(&cap, &lex, None, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = verb_substitute_negative(&cap, &lex, None, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.tokens[3], "running");
        assert!(lex.lookup(&a.tokens[3]).unwrap().is_motion_verb());
        let none = verb_substitute_negative(&Caption::parse("the red ball"), &lex, None, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(matches!(none, Err(Error::NoVerb)));
    }
}
