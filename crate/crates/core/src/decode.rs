//! Iterative decoding of the claim label and phrase latents.
//!
//! Starting from a random `z`, decoding alternates
//! `y ← argmax p(y | onehot(z), x)` and `z ← q(z | y, x)` until the discrete
//! state `(y, argmax z)` repeats. A repeat of the immediately preceding state
//! is a fixed point; a repeat of an older state is a cycle and is reported as
//! not converged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution as _};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::encoder::{fnv1a, FeatureVector};
use crate::error::{Error, Result};
use crate::latent::{classifier_p, encode_record, posterior_q, LatentState, ModelParams, RecordInput};
use crate::logic::{hard_aggregate, soft_aggregate, Distribution3, Veracity};

pub const DEFAULT_MAX_ITERS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            max_iters: DEFAULT_MAX_ITERS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub record_id: String,
    pub label: Veracity,
    pub y: Distribution3,
    pub z: Vec<Distribution3>,
    pub z_labels: Vec<Veracity>,
    /// Product t-norm aggregate of `z`; absent without phrases.
    pub y_z_soft: Option<Distribution3>,
    /// Hard aggregate of `z_labels`; absent without phrases.
    pub y_z_hard: Option<Veracity>,
    pub alphas: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Phrases whose latent argmax is REF.
    pub culprits: Vec<usize>,
    /// Classified from the evidence alone because the claim has no phrases.
    pub degenerate: bool,
}

impl VerificationResult {
    /// Soft aggregate label, if any.
    pub fn soft_label(&self) -> Option<Veracity> {
        self.y_z_soft.map(|d| d.argmax())
    }
}

/// Encoder outputs of one record, computed once per decode.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedRecord {
    pub h_global: FeatureVector,
    pub h_locals: Vec<FeatureVector>,
    pub h_local: FeatureVector,
    pub alphas: Vec<f64>,
}

pub fn encode_input(model: &ModelParams, input: &RecordInput) -> EncodedRecord {
    let mut tape = Tape::new();
    let enc = encode_record(&mut tape, model, input);
    let v = |x| FeatureVector(tape.value(x).to_vec());
    EncodedRecord {
        h_global: v(enc.h_global),
        h_locals: enc.h_locals.iter().map(|&h| v(h)).collect(),
        h_local: v(enc.h_local),
        alphas: enc.alpha.map(|a| tape.value(a).to_vec()).unwrap_or_default(),
    }
}

/// Each slot drawn uniformly from the simplex.
pub fn init_latent(n_phrases: usize, max_phrases: usize, rng: &mut impl rand::Rng) -> Result<LatentState> {
    if n_phrases == 0 {
        return Err(Error::validation("latent initialization needs at least one phrase"));
    }
    let dir = Dirichlet::new(&[1.0, 1.0, 1.0]).expect("valid concentration");
    let slots = (0..n_phrases)
        .map(|_| {
            let s = dir.sample(rng);
            crate::logic::normalize_guard([s[0], s[1], s[2]])
        })
        .collect::<Result<Vec<_>>>()?;
    LatentState::new(slots, max_phrases)
}

pub fn record_rng(seed: u64, record_id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(record_id.as_bytes()))
}

pub fn verify_input(
    record_id: &str,
    input: &RecordInput,
    model: &ModelParams,
    config: &DecodeConfig,
) -> Result<VerificationResult> {
    if config.max_iters == 0 {
        return Err(Error::validation("max_iters must be positive"));
    }
    let max = model.config.max_phrases;
    let n = input.n_phrases();
    if n > max {
        return Err(Error::validation(format!(
            "record {record_id}: {n} phrases exceed max_phrases {max}"
        )));
    }
    let enc = encode_input(model, input);
    if n == 0 {
        let empty = LatentState::new(Vec::new(), max)?;
        let y = classifier_p(&empty, &enc.h_global, &enc.h_local, model);
        return Ok(VerificationResult {
            record_id: record_id.to_string(),
            label: y.argmax(),
            y,
            z: Vec::new(),
            z_labels: Vec::new(),
            y_z_soft: None,
            y_z_hard: None,
            alphas: Vec::new(),
            iterations: 1,
            converged: true,
            culprits: Vec::new(),
            degenerate: true,
        });
    }
    let mut rng = record_rng(config.seed, record_id);
    let mut z = init_latent(n, max, &mut rng)?;
    let mask: Vec<bool> = z.mask.clone();
    let mut history: Vec<(Veracity, Vec<Veracity>)> = Vec::new();
    let mut y = Distribution3::UNIFORM;
    let mut iterations = 0;
    let mut converged = false;
    for it in 1..=config.max_iters {
        iterations = it;
        y = classifier_p(&z.discretized(), &enc.h_global, &enc.h_local, model);
        let label = y.argmax();
        z = posterior_q(label, &enc.h_locals, &mask, &enc.h_global, model)?;
        let state = (label, z.argmax());
        if let Some(pos) = history.iter().position(|s| *s == state) {
            converged = pos + 1 == history.len();
            break;
        }
        history.push(state);
    }
    let zs: Vec<Distribution3> = z.active().copied().collect();
    let z_labels: Vec<Veracity> = zs.iter().map(Distribution3::argmax).collect();
    let culprits = z_labels
        .iter()
        .enumerate()
        .filter(|(_, v)| **v == Veracity::Ref)
        .map(|(i, _)| i)
        .collect();
    Ok(VerificationResult {
        record_id: record_id.to_string(),
        label: y.argmax(),
        y,
        y_z_soft: Some(soft_aggregate(&zs)?),
        y_z_hard: Some(hard_aggregate(&z_labels)?),
        z: zs,
        z_labels,
        alphas: enc.alphas,
        iterations,
        converged,
        culprits,
        degenerate: false,
    })
}
