//! End-to-end orchestration: record preparation, training, decoding,
//! evaluation, checkpoints and ablation sweeps.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::config::RunConfig;
use crate::dataset::InputRecord;
use crate::decode::{verify_input, VerificationResult};
use crate::decompose::{heuristic_extract_with, resolve_phrases_indexed, Claim, VerbLexicon};
use crate::encoder::{featurize_pair, fnv1a, EncoderConfig};
use crate::error::{Error, Result};
use crate::latent::{
    train, ModelConfig, ModelParams, NliPriorRow, NliPriorTable, PriorKind, PriorSource, RecordInput, TrainExample,
    TrainLog,
};
use crate::logic::{Distribution3, Veracity};
use crate::metrics::{evaluate, GoldRecord, MetricReport};
use crate::premise::{
    build_premises, make_cloze_question, mask_premises_seeded, AnswerRequest, Answerer, ExternalAnswers, LexicalAnswerer,
    LocalPremise, PremiseRow,
};

/// A record with resolved phrases and local premises.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedRecord {
    pub record: InputRecord,
    pub claim: Claim,
    pub premises: Vec<LocalPremise>,
    /// Gold culprits re-indexed onto `claim.phrases`.
    pub culprits: Option<Vec<usize>>,
}

impl PreparedRecord {
    pub fn gold(&self) -> GoldRecord {
        GoldRecord {
            culprit_indices: self.culprits.as_ref().map(|c| c.iter().copied().collect()),
            ..GoldRecord::from_input(&self.record)
        }
    }

    pub fn input(&self, config: &EncoderConfig) -> RecordInput {
        RecordInput {
            global: featurize_pair(
                &self.claim.text,
                &self.record.evidence().concatenated(),
                config.global_token_cap,
                config,
            ),
            locals: self
                .premises
                .iter()
                .map(|p| featurize_pair(&self.claim.text, &p.text, config.local_token_cap, config))
                .collect(),
        }
    }

    pub fn premise_rows(&self) -> Vec<PremiseRow> {
        self.premises.iter().map(|p| PremiseRow::new(&self.record.id, p)).collect()
    }
}

pub fn load_lexicon(config: &RunConfig) -> Result<Option<VerbLexicon>> {
    config.verb_lexicon.as_deref().map(VerbLexicon::load).transpose()
}

/// Resolves phrases and re-indexes gold culprits; culprits whose phrase was
/// pruned are dropped.
pub fn resolve_claim(
    rec: &InputRecord,
    max_phrases: usize,
    lexicon: Option<&VerbLexicon>,
) -> Result<(Claim, Option<Vec<usize>>)> {
    let extracted;
    let provided = match (&rec.phrases, lexicon) {
        (Some(p), _) => Some(p.as_slice()),
        (None, Some(lex)) => {
            extracted = heuristic_extract_with(&rec.claim, lex)?;
            Some(extracted.as_slice())
        }
        (None, None) => None,
    };
    let kept = resolve_phrases_indexed(&rec.claim, provided, max_phrases)
        .map_err(|e| Error::validation(format!("record {}: {e}", rec.id)))?;
    let culprits = rec.culprits.as_ref().map(|c| {
        let mapped: Vec<usize> = kept
            .iter()
            .enumerate()
            .filter(|(_, (orig, _))| c.contains(orig))
            .map(|(j, _)| j)
            .collect();
        if mapped.len() < c.len() {
            log::warn!("record {}: {} culprit(s) refer to pruned phrases", rec.id, c.len() - mapped.len());
        }
        mapped
    });
    let phrases = kept.into_iter().map(|(_, p)| p).collect();
    let claim = Claim::new(rec.id.clone(), rec.claim.clone(), phrases, max_phrases)?;
    Ok((claim, culprits))
}

/// Seed for masking one record's premises.
fn mask_seed(seed: u64, record_id: &str) -> u64 {
    seed ^ fnv1a(record_id.as_bytes()).rotate_left(17)
}

pub fn prepare_record(
    rec: &InputRecord,
    config: &RunConfig,
    answerer: &dyn Answerer,
    lexicon: Option<&VerbLexicon>,
) -> Result<PreparedRecord> {
    let (claim, culprits) = resolve_claim(rec, config.max_phrases, lexicon)?;
    let mut premises = build_premises(&claim, &rec.evidence(), answerer, config.top_k)?;
    if config.mask_rate > 0.0 {
        premises = mask_premises_seeded(&premises, config.mask_rate, mask_seed(config.seed, &rec.id))?;
    }
    Ok(PreparedRecord {
        record: rec.clone(),
        claim,
        premises,
        culprits,
    })
}

/// Prepares records in parallel, keeping input order.
pub fn prepare_records(
    records: &[InputRecord],
    config: &RunConfig,
    answerer: &dyn Answerer,
) -> Result<Vec<PreparedRecord>> {
    let lexicon = load_lexicon(config)?;
    records
        .par_iter()
        .map(|r| prepare_record(r, config, answerer, lexicon.as_ref()))
        .collect()
}

pub fn prepare_lexical(records: &[InputRecord], config: &RunConfig) -> Result<Vec<PreparedRecord>> {
    prepare_records(records, config, &LexicalAnswerer::default())
}

/// The configured answerer: external answers when `answers_file` is set,
/// the lexical baseline otherwise.
pub fn answerer(config: &RunConfig) -> Result<Box<dyn Answerer>> {
    match &config.answers_file {
        Some(path) => {
            let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
            let answers = ExternalAnswers::from_reader(std::io::BufReader::new(f), &path.display().to_string())?;
            Ok(Box::new(answers))
        }
        None => Ok(Box::new(LexicalAnswerer::default())),
    }
}

/// Prepares records with the configured answerer.
pub fn prepare(records: &[InputRecord], config: &RunConfig) -> Result<Vec<PreparedRecord>> {
    prepare_records(records, config, answerer(config)?.as_ref())
}

/// One cloze request per resolved phrase, for answering outside this crate.
pub fn answer_requests(records: &[InputRecord], config: &RunConfig) -> Result<Vec<AnswerRequest>> {
    let lexicon = load_lexicon(config)?;
    let mut out = Vec::new();
    for rec in records {
        let (claim, _) = resolve_claim(rec, config.max_phrases, lexicon.as_ref())?;
        let evidence = rec.evidence();
        for i in 0..claim.phrases.len() {
            out.push(AnswerRequest::new(&make_cloze_question(&claim, i)?, &evidence));
        }
    }
    Ok(out)
}

// Moderately confident, like an entailment model applied off the shelf: a
// phrase verdict is usually right, but compounding over a claim's phrases
// does not by itself yield the claim verdict.
const ENTAILED: [f64; 3] = [0.68, 0.16, 0.16];
const CONTRADICTED: [f64; 3] = [0.21, 0.58, 0.21];
const NEUTRAL: [f64; 3] = [0.21, 0.21, 0.58];

/// Words that make an answer non-committal.
const HEDGES: &[&str] = &[
    "unknown", "unnamed", "unidentified", "unspecified", "undisclosed", "local", "small", "new", "certain",
    "some", "someone", "something", "somewhere", "various", "several", "connected", "related", "associated",
];

fn is_hedged(answer: &str) -> bool {
    crate::text::tokenize(answer)
        .iter()
        .any(|t| HEDGES.contains(&t.lower().as_str()))
}

/// Per-phrase prior derived from the premises, standing in for an
/// entailment model: a top answer equal to the phrase is entailed, a hedged
/// answer is neutral, any other answer contradicts, and a masked slot is
/// uniform.
pub fn lexical_prior_rows(prepared: &[PreparedRecord]) -> Vec<NliPriorRow> {
    prepared
        .iter()
        .flat_map(|p| {
            p.premises.iter().map(move |prem| {
                let phrase = &p.claim.phrases[prem.phrase_index].text;
                let top = &prem.answers[0];
                let t = if prem.is_masked() {
                    None
                } else if top.to_lowercase() == phrase.to_lowercase() {
                    Some(ENTAILED)
                } else if is_hedged(top) {
                    Some(NEUTRAL)
                } else {
                    Some(CONTRADICTED)
                };
                let d = t.map_or(Distribution3::UNIFORM, |[s, r, n]| {
                    Distribution3::new(s, r, n).expect("constant simplex")
                });
                NliPriorRow::new(p.record.id.clone(), prem.phrase_index, d)
            })
        })
        .collect()
}

/// Resolves the configured prior. Without a source file the nli prior is
/// derived lexically from `train`.
pub fn build_prior(config: &RunConfig, train: &[PreparedRecord]) -> Result<PriorSource> {
    match (config.prior, &config.prior_source) {
        (PriorKind::Nli, None) => Ok(PriorSource::Nli(NliPriorTable::from_rows(lexical_prior_rows(train))?)),
        _ => config.prior_spec().resolve(),
    }
}

pub fn train_examples(prepared: &[PreparedRecord], config: &EncoderConfig) -> Vec<TrainExample> {
    prepared
        .par_iter()
        .map(|p| TrainExample {
            id: p.record.id.clone(),
            input: p.input(config),
            label: p.record.label,
        })
        .collect()
}

pub fn train_model(prepared: &[PreparedRecord], config: &RunConfig) -> Result<(ModelParams, TrainLog)> {
    let prior = build_prior(config, prepared)?;
    let model_config = config.model_config();
    let examples = train_examples(prepared, &model_config.encoder);
    let init = ModelParams::init(model_config, config.seed)?;
    train(init, &examples, &config.train_config(), &prior)
}

/// Decodes every record in parallel, keeping input order.
pub fn verify_records(
    model: &ModelParams,
    prepared: &[PreparedRecord],
    config: &RunConfig,
) -> Result<Vec<VerificationResult>> {
    let decode = config.decode_config();
    let enc = &model.config.encoder;
    prepared
        .par_iter()
        .map(|p| verify_input(&p.record.id, &p.input(enc), model, &decode))
        .collect()
}

pub fn evaluate_prepared(results: &[VerificationResult], prepared: &[PreparedRecord]) -> Result<MetricReport> {
    if results.len() != prepared.len() {
        return Err(Error::validation(format!(
            "{} results for {} records",
            results.len(),
            prepared.len()
        )));
    }
    for (r, p) in results.iter().zip(prepared) {
        if r.record_id != p.record.id {
            return Err(Error::validation(format!("result {} is not aligned with record {}", r.record_id, p.record.id)));
        }
    }
    let golds: Vec<GoldRecord> = prepared.iter().map(PreparedRecord::gold).collect();
    let retrieved: Vec<_> = prepared.iter().map(|p| p.record.retrieved()).collect();
    evaluate(results, &retrieved, &golds)
}

/// Scores results against records matched by id, re-indexing culprits the
/// same way preparation does.
pub fn evaluate_records(
    results: &[VerificationResult],
    records: &[InputRecord],
    config: &RunConfig,
) -> Result<MetricReport> {
    let pairs = crate::metrics::align_by_id(results, records)?;
    let lexicon = load_lexicon(config)?;
    let mut rs = Vec::with_capacity(pairs.len());
    let mut golds = Vec::with_capacity(pairs.len());
    let mut retrieved = Vec::with_capacity(pairs.len());
    for (r, rec) in pairs {
        let (_, culprits) = resolve_claim(rec, config.max_phrases, lexicon.as_ref())?;
        rs.push(r.clone());
        golds.push(GoldRecord {
            culprit_indices: culprits.map(|c| c.into_iter().collect()),
            ..GoldRecord::from_input(rec)
        });
        retrieved.push(rec.retrieved());
    }
    evaluate(&rs, &retrieved, &golds)
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub model: ModelParams,
    pub log: TrainLog,
    pub results: Vec<VerificationResult>,
    pub report: MetricReport,
}

/// Prepares both splits with the configured answerer, trains, decodes the
/// evaluation split and scores it.
pub fn run_experiment(
    train_records: &[InputRecord],
    eval_records: &[InputRecord],
    config: &RunConfig,
) -> Result<ExperimentOutcome> {
    config.validate()?;
    let train_prep = prepare(train_records, config)?;
    let eval_prep = prepare(eval_records, config)?;
    let (model, log) = train_model(&train_prep, config)?;
    let results = verify_records(&model, &eval_prep, config)?;
    let report = evaluate_prepared(&results, &eval_prep)?;
    Ok(ExperimentOutcome {
        model,
        log,
        results,
        report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationKind {
    Lambda,
    Prior,
    Mask,
}

impl std::str::FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(AblationKind::Lambda),
            "prior" => Ok(AblationKind::Prior),
            "mask" => Ok(AblationKind::Mask),
            other => Err(Error::validation(format!("unknown ablation `{other}`"))),
        }
    }
}

impl AblationKind {
    pub fn key(self) -> &'static str {
        match self {
            AblationKind::Lambda => "lambda",
            AblationKind::Prior => "prior",
            AblationKind::Mask => "mask_rate",
        }
    }

    pub fn default_grid(self) -> Vec<String> {
        let g: &[&str] = match self {
            AblationKind::Lambda => &["0", "0.3", "0.5", "0.7", "0.9"],
            AblationKind::Prior => &["nli", "pseudo", "uniform"],
            AblationKind::Mask => &["0", "0.25", "0.5", "0.75", "1"],
        };
        g.iter().map(|s| s.to_string()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub kind: AblationKind,
    pub value: String,
    pub report: MetricReport,
}

/// Trains and evaluates once per grid value, overriding the ablated key.
pub fn run_ablation(
    kind: AblationKind,
    grid: &[String],
    base: &RunConfig,
    train_records: &[InputRecord],
    eval_records: &[InputRecord],
) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(Error::validation("ablation grid is empty"));
    }
    grid.iter()
        .map(|value| {
            let mut config = base.clone();
            let v = if kind == AblationKind::Prior {
                format!("\"{value}\"")
            } else {
                value.clone()
            };
            config.set(kind.key(), &v)?;
            log::info!("ablation {} = {value}", kind.key());
            let outcome = run_experiment(train_records, eval_records, &config)?;
            Ok(AblationRow {
                kind,
                value: value.clone(),
                report: outcome.report,
            })
        })
        .collect()
}

pub const CHECKPOINT_FORMAT: &str = "veracity-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized model with the configuration that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: RunConfig,
    pub model_config: ModelConfig,
    pub params: ParamStore,
}

pub fn save_checkpoint(path: &Path, model: &ModelParams, config: &RunConfig) -> Result<()> {
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        model_config: model.config.clone(),
        params: model.store.clone(),
    };
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer(std::io::BufWriter::new(f), &ck)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, RunConfig)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_reader(std::io::BufReader::new(f))?;
    if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
        return Err(Error::validation(format!(
            "{}: unsupported checkpoint {} v{}",
            path.display(),
            ck.format,
            ck.version
        )));
    }
    Ok((ModelParams::from_store(ck.model_config, ck.params)?, ck.config))
}

/// Share of decoded records that reached a fixed point within `iters`.
pub fn converged_within(results: &[VerificationResult], iters: usize) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    results.iter().filter(|r| r.converged && r.iterations <= iters).count() as f64 / results.len() as f64
}

/// Labels in dataset order.
pub fn labels(prepared: &[PreparedRecord]) -> Vec<Veracity> {
    prepared.iter().map(|p| p.record.label).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preparation_remaps_culprits_and_masks() {
        use crate::decompose::{ClaimPhrase, PhraseKind};
        let line = r#"{"id": "x", "claim": "Ann Lee won the cup.", "label": "REFUTES",
            "evidence_texts": [{"page_id": "Ann", "line_no": 0, "text": "Ann Lee lost the cup."}],
            "gold_evidence": [[["Ann", 0]]]}"#;
        let mut rec: InputRecord = serde_json::from_str(&line.replace('\n', " ")).unwrap();
        rec.phrases = Some(vec![
            ClaimPhrase::new("Ann", 0, 3, PhraseKind::Ne),
            ClaimPhrase::new("Ann Lee", 0, 7, PhraseKind::Ne),
            ClaimPhrase::new("won", 8, 11, PhraseKind::Verb),
        ]);
        rec.culprits = Some(vec![2]);
        let cfg = RunConfig::default();
        let p = prepare_lexical(std::slice::from_ref(&rec), &cfg).unwrap().remove(0);
        assert_eq!(p.claim.phrases.len(), 2);
        assert_eq!(p.culprits.as_deref(), Some(&[1][..]));
        assert_eq!(p.premises[1].answers[0], "lost");
        rec.culprits = Some(vec![1]);
        let p = prepare_lexical(std::slice::from_ref(&rec), &cfg).unwrap().remove(0);
        assert_eq!(p.culprits.as_deref(), Some(&[][..]));

        let masked = RunConfig {
            mask_rate: 1.0,
            ..RunConfig::default()
        };
        let p = prepare_lexical(&[rec], &masked).unwrap().remove(0);
        assert!(p.premises.iter().all(LocalPremise::is_masked));
        assert!(lexical_prior_rows(&[p]).iter().all(|r| r.distribution().unwrap() == Distribution3::UNIFORM));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let config = RunConfig {
            d: 4,
            n_hash_buckets: 16,
            ..RunConfig::default()
        };
        let model = ModelParams::init(config.model_config(), 3).unwrap();
        save_checkpoint(&path, &model, &config).unwrap();
        let (again, cfg) = load_checkpoint(&path).unwrap();
        assert_eq!(again, model);
        assert_eq!(cfg, config);
    }
}
