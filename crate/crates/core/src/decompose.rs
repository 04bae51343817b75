//! Claim phrase extraction.
//!
//! Pre-annotated spans are preferred when a record carries them; otherwise a
//! deterministic surface heuristic proposes named entities (capitalized
//! runs), verbs (lexicon lookup) and noun phrases (content-word runs,
//! optionally led by a determiner).

use std::collections::HashSet;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{char_len, char_slice, tokenize, Token};

pub const DEFAULT_MAX_PHRASES: usize = 8;

const BUNDLED_VERBS: &str = include_str!("../resources/verbs.txt");

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "and", "or", "but", "nor", "of", "in", "on", "at", "to", "for", "from",
    "by", "with", "as", "into", "onto", "about", "after", "before", "during", "over", "under",
    "between", "through", "against", "than", "is", "are", "was", "were", "be", "been", "being",
    "am", "has", "have", "had", "do", "does", "did", "will", "would", "shall", "should", "can",
    "could", "may", "might", "must", "not", "no", "it", "its", "he", "she", "they", "them",
    "his", "her", "their", "this", "that", "these", "those", "which", "who", "whom", "whose",
    "what", "there", "here", "also", "only", "very", "so", "if", "then", "while", "where",
    "when", "all", "any", "some", "each", "every", "both", "either", "neither", "one",
];

const DETERMINERS: &[&str] = &["a", "an", "the"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PhraseKind {
    #[serde(rename = "NE")]
    Ne,
    #[serde(rename = "VERB")]
    Verb,
    #[serde(rename = "NP")]
    Np,
    #[serde(rename = "ADJ")]
    Adj,
}

/// A phrase of a claim, addressed by half-open character offsets.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClaimPhrase {
    pub text: String,
    pub start: usize,
    pub end: usize,
    pub kind: PhraseKind,
}

impl ClaimPhrase {
    pub fn new(text: impl Into<String>, start: usize, end: usize, kind: PhraseKind) -> Self {
        ClaimPhrase {
            text: text.into(),
            start,
            end,
            kind,
        }
    }

    fn overlaps(&self, other: &ClaimPhrase) -> bool {
        self.start < other.end && other.start < self.end
    }

    fn verify(&self, claim_text: &str) -> Result<()> {
        match char_slice(claim_text, self.start, self.end) {
            Some(slice) if slice == self.text && self.start < self.end => Ok(()),
            Some(slice) => Err(Error::validation(format!(
                "phrase `{}` at {}..{} does not match claim text `{slice}`",
                self.text, self.start, self.end
            ))),
            None => Err(Error::validation(format!(
                "phrase `{}` span {}..{} is outside a claim of {} characters",
                self.text,
                self.start,
                self.end,
                char_len(claim_text)
            ))),
        }
    }
}

/// A claim with its resolved phrase set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    pub id: String,
    pub text: String,
    pub phrases: Vec<ClaimPhrase>,
}

impl Claim {
    /// Checks span bounds, slice agreement, pairwise non-overlap and the cap.
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        phrases: Vec<ClaimPhrase>,
        max_phrases: usize,
    ) -> Result<Self> {
        let claim = Claim {
            id: id.into(),
            text: text.into(),
            phrases,
        };
        claim.validate(max_phrases)?;
        Ok(claim)
    }

    pub fn validate(&self, max_phrases: usize) -> Result<()> {
        if self.phrases.len() > max_phrases {
            return Err(Error::validation(format!(
                "claim {} has {} phrases, cap is {max_phrases}",
                self.id,
                self.phrases.len()
            )));
        }
        for (i, p) in self.phrases.iter().enumerate() {
            p.verify(&self.text)?;
            if let Some(q) = self.phrases[..i].iter().find(|q| q.overlaps(p)) {
                return Err(Error::validation(format!(
                    "claim {}: phrases `{}` and `{}` overlap",
                    self.id, q.text, p.text
                )));
            }
        }
        Ok(())
    }
}

/// Lowercase verb tokens used by the heuristic extractor.
#[derive(Debug, Clone)]
pub struct VerbLexicon(HashSet<String>);

impl VerbLexicon {
    pub fn parse(contents: &str) -> Self {
        VerbLexicon(
            contents
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_lowercase)
                .collect(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let contents = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&contents))
    }

    pub fn bundled() -> &'static VerbLexicon {
        static LEXICON: OnceLock<VerbLexicon> = OnceLock::new();
        LEXICON.get_or_init(|| VerbLexicon::parse(BUNDLED_VERBS))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(word)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub(crate) fn is_stopword(lower: &str) -> bool {
    STOPWORDS.contains(&lower)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TokClass {
    Punct,
    Stop,
    Det,
    Verb,
    Cap,
    Content,
}

fn classify(tok: &Token<'_>, verbs: &VerbLexicon) -> TokClass {
    if tok.is_punct() {
        return TokClass::Punct;
    }
    let lower = tok.lower();
    if DETERMINERS.contains(&lower.as_str()) {
        TokClass::Det
    } else if is_stopword(&lower) {
        TokClass::Stop
    } else if verbs.contains(&lower) {
        TokClass::Verb
    } else if tok.is_capitalized() {
        TokClass::Cap
    } else {
        TokClass::Content
    }
}

/// Heuristic extraction with the bundled verb lexicon.
pub fn heuristic_extract(text: &str) -> Result<Vec<ClaimPhrase>> {
    heuristic_extract_with(text, VerbLexicon::bundled())
}

pub fn heuristic_extract_with(text: &str, verbs: &VerbLexicon) -> Result<Vec<ClaimPhrase>> {
    if text.trim().is_empty() {
        return Err(Error::validation("cannot extract phrases from an empty claim"));
    }
    let toks = tokenize(text);
    let classes: Vec<TokClass> = toks.iter().map(|t| classify(t, verbs)).collect();
    let mut phrases = Vec::new();
    let mut push = |from: usize, to: usize, kind: PhraseKind| {
        let (start, end) = (toks[from].start, toks[to].end);
        let slice = char_slice(text, start, end).expect("token offsets are in bounds");
        phrases.push(ClaimPhrase::new(slice, start, end, kind));
    };

    let mut i = 0;
    while i < toks.len() {
        match classes[i] {
            TokClass::Punct | TokClass::Stop => i += 1,
            TokClass::Verb => {
                push(i, i, PhraseKind::Verb);
                i += 1;
            }
            TokClass::Cap => {
                let mut j = i;
                while j + 1 < toks.len() && classes[j + 1] == TokClass::Cap {
                    j += 1;
                }
                push(i, j, PhraseKind::Ne);
                i = j + 1;
            }
            TokClass::Det | TokClass::Content => {
                let mut j = i;
                while j + 1 < toks.len() && classes[j + 1] == TokClass::Content {
                    j += 1;
                }
                if classes[i] == TokClass::Det && j == i {
                    i += 1;
                    continue;
                }
                push(i, j, PhraseKind::Np);
                i = j + 1;
            }
        }
    }
    Ok(phrases)
}

/// Resolves the phrase set for a claim.
///
/// Provided spans are validated against the text, exact duplicates dropped,
/// and any span overlapping one that starts earlier is pruned. Without
/// annotations the heuristic extractor runs. The result is truncated to
/// `max_phrases`.
pub fn resolve_phrases(
    claim_text: &str,
    provided: Option<&[ClaimPhrase]>,
    max_phrases: usize,
) -> Result<Vec<ClaimPhrase>> {
    resolve_phrases_indexed(claim_text, provided, max_phrases)
        .map(|kept| kept.into_iter().map(|(_, p)| p).collect())
}

/// Like [`resolve_phrases`], also returning each kept phrase's position in
/// the provided list (or in the heuristic output).
pub fn resolve_phrases_indexed(
    claim_text: &str,
    provided: Option<&[ClaimPhrase]>,
    max_phrases: usize,
) -> Result<Vec<(usize, ClaimPhrase)>> {
    let candidates = match provided {
        Some(list) => {
            for p in list {
                p.verify(claim_text)?;
            }
            list.to_vec()
        }
        None => heuristic_extract(claim_text)?,
    };

    // Leftmost start wins an overlap; list order breaks ties.
    let mut by_start: Vec<usize> = (0..candidates.len()).collect();
    by_start.sort_by_key(|&i| (candidates[i].start, i));
    let mut keep = vec![false; candidates.len()];
    let mut kept: Vec<&ClaimPhrase> = Vec::new();
    for i in by_start {
        let c = &candidates[i];
        if kept.iter().any(|k| k.overlaps(c)) {
            continue;
        }
        keep[i] = true;
        kept.push(c);
    }

    Ok(candidates
        .into_iter()
        .enumerate()
        .filter(|(i, _)| keep[*i])
        .take(max_phrases)
        .collect())
}
