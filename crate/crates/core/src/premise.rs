//! Cloze probing and local premise construction.
//!
//! For every claim phrase a cloze question masks the phrase, an [`Answerer`]
//! proposes fillers from the evidence, and the fillers are substituted back
//! into the claim to form that phrase's local premise.
//!
//! The built-in [`LexicalAnswerer`] is extractive. Every evidence span of up
//! to [`MAX_SPAN_TOKENS`] non-punctuation tokens is scored by how well the
//! tokens around it line up with the tokens around `[MASK]`:
//!
//! ```text
//! score(span) = Σ_{j=1..W} [ctx_left_j(span) == ctx_left_j(mask)] / j
//!             + Σ_{j=1..W} [ctx_right_j(span) == ctx_right_j(mask)] / j
//! ```
//!
//! with case-insensitive token equality and `W = CONTEXT_WINDOW`. Spans with a
//! positive score are ranked by score, then earlier start, then fewer tokens.
//! An external QA system can replace the baseline via a JSON-lines exchange.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decompose::Claim;
use crate::error::{Error, Result};
use crate::logic::Veracity;
use crate::text::{char_len, char_slice, splice_chars, tokenize, Token};

pub const MASK: &str = "[MASK]";
pub const ANSWER_SEPARATOR: &str = " / ";
pub const MAX_SPAN_TOKENS: usize = 6;
pub const CONTEXT_WINDOW: usize = 3;
pub const DEFAULT_TOP_K: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceSentence {
    pub page_id: String,
    pub line_no: i64,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EvidenceSet {
    pub sentences: Vec<EvidenceSentence>,
}

impl EvidenceSet {
    pub fn new(sentences: Vec<EvidenceSentence>) -> Self {
        EvidenceSet { sentences }
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.iter().all(|s| s.text.trim().is_empty())
    }

    /// Sentences joined by single spaces in retrieval order.
    pub fn concatenated(&self) -> String {
        self.sentences
            .iter()
            .map(|s| s.text.trim())
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn texts(&self) -> Vec<String> {
        self.sentences.iter().map(|s| s.text.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClozeQuestion {
    pub claim_id: String,
    pub phrase_index: usize,
    pub text: String,
    pub masked_phrase: String,
}

impl ClozeQuestion {
    /// Exchange-file identifier, `"<claim id>:<phrase index>"`.
    pub fn qid(&self) -> String {
        format!("{}:{}", self.claim_id, self.phrase_index)
    }

    /// Puts `phrase` back in place of the mask.
    pub fn fill(&self, phrase: &str) -> String {
        self.text.replacen(MASK, phrase, 1)
    }
}

pub fn make_cloze_question(claim: &Claim, phrase_index: usize) -> Result<ClozeQuestion> {
    let phrase = claim.phrases.get(phrase_index).ok_or_else(|| {
        Error::validation(format!(
            "phrase index {phrase_index} out of range for claim {} with {} phrases",
            claim.id,
            claim.phrases.len()
        ))
    })?;
    if claim.text.contains(MASK) {
        return Err(Error::validation(format!(
            "claim {} already contains {MASK}",
            claim.id
        )));
    }
    Ok(ClozeQuestion {
        claim_id: claim.id.clone(),
        phrase_index,
        text: splice_chars(&claim.text, phrase.start, phrase.end, MASK),
        masked_phrase: phrase.text.clone(),
    })
}

/// Something that fills a cloze question from evidence.
pub trait Answerer: Sync {
    /// Returns between one and `k` ranked answers.
    fn answer(&self, q: &ClozeQuestion, evidence: &EvidenceSet, k: usize) -> Result<Vec<String>>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LexicalAnswerer {
    pub max_span_tokens: usize,
    pub window: usize,
}

impl Default for LexicalAnswerer {
    fn default() -> Self {
        LexicalAnswerer {
            max_span_tokens: MAX_SPAN_TOKENS,
            window: CONTEXT_WINDOW,
        }
    }
}

/// A scored candidate span over evidence tokens `[start, end)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSpan {
    pub start: usize,
    pub end: usize,
    pub score: f64,
    pub text: String,
}

impl LexicalAnswerer {
    /// All positive-scoring spans, best first, without deduplication.
    pub fn scored_spans(&self, q: &ClozeQuestion, evidence: &str) -> Vec<ScoredSpan> {
        let qtoks = tokenize(&q.text);
        let Some(mask_at) = qtoks.iter().position(|t| t.text == MASK) else {
            return Vec::new();
        };
        let qlow: Vec<String> = qtoks.iter().map(Token::lower).collect();
        let etoks = tokenize(evidence);
        let elow: Vec<String> = etoks.iter().map(Token::lower).collect();

        let mut out = Vec::new();
        for start in 0..etoks.len() {
            for len in 1..=self.max_span_tokens {
                let end = start + len;
                if end > etoks.len() || etoks[end - 1].is_punct() || etoks[end - 1].text == MASK {
                    break;
                }
                let score = self.context_score(&qlow, mask_at, &elow, start, end);
                if score > 0.0 {
                    let text = char_slice(evidence, etoks[start].start, etoks[end - 1].end)
                        .expect("token offsets are in bounds")
                        .to_string();
                    out.push(ScoredSpan {
                        start,
                        end,
                        score,
                        text,
                    });
                }
            }
        }
        out.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.start.cmp(&b.start))
                .then((a.end - a.start).cmp(&(b.end - b.start)))
        });
        out
    }

    fn context_score(
        &self,
        q: &[String],
        mask_at: usize,
        e: &[String],
        start: usize,
        end: usize,
    ) -> f64 {
        let mut score = 0.0;
        for j in 1..=self.window {
            let w = 1.0 / j as f64;
            if j <= mask_at && j <= start && q[mask_at - j] == e[start - j] {
                score += w;
            }
            if mask_at + j < q.len() && end + j - 1 < e.len() && q[mask_at + j] == e[end + j - 1] {
                score += w;
            }
        }
        score
    }
}

impl Answerer for LexicalAnswerer {
    fn answer(&self, q: &ClozeQuestion, evidence: &EvidenceSet, k: usize) -> Result<Vec<String>> {
        if k == 0 {
            return Err(Error::validation("answer count k must be at least 1"));
        }
        if evidence.is_empty() {
            return Ok(vec![q.masked_phrase.clone()]);
        }
        let mut seen = HashSet::new();
        let answers: Vec<String> = self
            .scored_spans(q, &evidence.concatenated())
            .into_iter()
            .filter(|s| seen.insert(s.text.to_lowercase()))
            .take(k)
            .map(|s| s.text)
            .collect();
        if answers.is_empty() {
            Ok(vec![q.masked_phrase.clone()])
        } else {
            Ok(answers)
        }
    }
}

/// Baseline answering with the default [`LexicalAnswerer`].
pub fn answer_question(q: &ClozeQuestion, evidence: &EvidenceSet, k: usize) -> Result<Vec<String>> {
    LexicalAnswerer::default().answer(q, evidence, k)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalPremise {
    pub phrase_index: usize,
    pub answers: Vec<String>,
    pub text: String,
    /// Character span of the substituted answer slot inside `text`.
    slot: (usize, usize),
}

impl LocalPremise {
    pub fn is_masked(&self) -> bool {
        self.answers.len() == 1 && self.answers[0] == MASK
    }

    fn with_slot_content(&self, answers: Vec<String>) -> LocalPremise {
        let filler = answers.join(ANSWER_SEPARATOR);
        let text = splice_chars(&self.text, self.slot.0, self.slot.1, &filler);
        LocalPremise {
            phrase_index: self.phrase_index,
            slot: (self.slot.0, self.slot.0 + char_len(&filler)),
            answers,
            text,
        }
    }
}

/// Substitutes the (deduplicated) answers for phrase `phrase_index`.
pub fn build_local_premise(
    claim: &Claim,
    phrase_index: usize,
    answers: &[String],
) -> Result<LocalPremise> {
    let phrase = claim.phrases.get(phrase_index).ok_or_else(|| {
        Error::validation(format!(
            "phrase index {phrase_index} out of range for claim {}",
            claim.id
        ))
    })?;
    let mut seen = HashSet::new();
    let answers: Vec<String> = answers
        .iter()
        .filter(|a| seen.insert(a.as_str()))
        .cloned()
        .collect();
    if answers.is_empty() {
        return Err(Error::validation(format!(
            "no answers for phrase {phrase_index} of claim {}",
            claim.id
        )));
    }
    let filler = answers.join(ANSWER_SEPARATOR);
    Ok(LocalPremise {
        phrase_index,
        text: splice_chars(&claim.text, phrase.start, phrase.end, &filler),
        slot: (phrase.start, phrase.start + char_len(&filler)),
        answers,
    })
}

/// Cloze, answer and substitute for every phrase of a claim.
pub fn build_premises(
    claim: &Claim,
    evidence: &EvidenceSet,
    answerer: &dyn Answerer,
    k: usize,
) -> Result<Vec<LocalPremise>> {
    (0..claim.phrases.len())
        .map(|i| {
            let q = make_cloze_question(claim, i)?;
            let answers = answerer.answer(&q, evidence, k)?;
            build_local_premise(claim, i, &answers)
        })
        .collect()
}

/// Replaces each premise's answer slot with `[MASK]` with probability `rho`.
///
/// One uniform draw is consumed per premise, so the outcome for a premise
/// depends only on `seed` and its position.
pub fn mask_premises(premises: &[LocalPremise], rho: f64, rng: &mut impl Rng) -> Result<Vec<LocalPremise>> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::validation(format!("mask rate {rho} outside [0, 1]")));
    }
    Ok(premises
        .iter()
        .map(|p| {
            let u: f64 = rng.gen();
            if u < rho {
                p.with_slot_content(vec![MASK.to_string()])
            } else {
                p.clone()
            }
        })
        .collect())
}

pub fn mask_premises_seeded(premises: &[LocalPremise], rho: f64, seed: u64) -> Result<Vec<LocalPremise>> {
    mask_premises(premises, rho, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MrcExample {
    pub question: ClozeQuestion,
    pub context: String,
    pub gold_answer: String,
}

/// Self-supervised reading-comprehension pairs from supported claims only.
pub fn build_mrc_training_set<'a>(
    records: impl IntoIterator<Item = (&'a Claim, Veracity, &'a EvidenceSet)>,
) -> Result<Vec<MrcExample>> {
    let mut out = Vec::new();
    for (claim, label, evidence) in records {
        if label != Veracity::Sup {
            continue;
        }
        let context = evidence.concatenated();
        for i in 0..claim.phrases.len() {
            let question = make_cloze_question(claim, i)?;
            out.push(MrcExample {
                gold_answer: question.masked_phrase.clone(),
                question,
                context: context.clone(),
            });
        }
    }
    Ok(out)
}

/// Line of the premises file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PremiseRow {
    pub record_id: String,
    pub phrase_index: usize,
    pub answers: Vec<String>,
    pub premise_text: String,
}

impl PremiseRow {
    pub fn new(record_id: &str, p: &LocalPremise) -> Self {
        PremiseRow {
            record_id: record_id.to_string(),
            phrase_index: p.phrase_index,
            answers: p.answers.clone(),
            premise_text: p.text.clone(),
        }
    }
}

/// Request line for an external answerer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerRequest {
    pub qid: String,
    pub cloze_text: String,
    pub evidence_texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerResponse {
    pub qid: String,
    pub answers: Vec<String>,
}

impl AnswerRequest {
    pub fn new(q: &ClozeQuestion, evidence: &EvidenceSet) -> Self {
        AnswerRequest {
            qid: q.qid(),
            cloze_text: q.text.clone(),
            evidence_texts: evidence.texts(),
        }
    }
}

/// Answers supplied by an external system through a response file.
#[derive(Debug, Clone, Default)]
pub struct ExternalAnswers {
    by_qid: HashMap<String, Vec<String>>,
}

impl ExternalAnswers {
    pub fn from_reader(reader: impl BufRead, origin: &str) -> Result<Self> {
        let mut by_qid = HashMap::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(origin, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: AnswerResponse = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: origin.into(),
                line: n + 1,
                message: e.to_string(),
            })?;
            by_qid.insert(row.qid, row.answers);
        }
        Ok(ExternalAnswers { by_qid })
    }

    pub fn len(&self) -> usize {
        self.by_qid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_qid.is_empty()
    }
}

impl Answerer for ExternalAnswers {
    fn answer(&self, q: &ClozeQuestion, _evidence: &EvidenceSet, k: usize) -> Result<Vec<String>> {
        let answers = self
            .by_qid
            .get(&q.qid())
            .ok_or_else(|| Error::validation(format!("no external answer for {}", q.qid())))?;
        let ranked: Vec<String> = answers
            .iter()
            .filter(|a| !a.trim().is_empty())
            .take(k)
            .cloned()
            .collect();
        if ranked.is_empty() {
            Ok(vec![q.masked_phrase.clone()])
        } else {
            Ok(ranked)
        }
    }
}

pub fn write_requests<'a>(
    out: &mut impl Write,
    requests: impl IntoIterator<Item = &'a AnswerRequest>,
) -> std::io::Result<()> {
    for r in requests {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
