//! Logic-regularized latent veracity model.
//!
//! Each claim phrase carries a three-valued latent `z_i`. The variational
//! posterior `q(z_i | y, x)` and the claim classifier `p(y | z, x)` are
//! two-layer MLPs whose output layer is a shared `3 × d_label` label
//! embedding matrix; `q` also reads the embedding of its conditioning label.
//!
//! Training minimizes
//!
//! ```text
//! L = (1 − λ) · L_var + λ · L_logic
//! L_var   = −log p(y* | z̃, x) + Σ_i KL(q(z_i) ‖ prior(z_i))
//! L_logic = KL(p(y | z̃, x) ‖ soft_aggregate(q(z)))
//! ```
//!
//! where `z̃` is one straight-through Gumbel sample per phrase. Padded slots
//! never enter a loss term, the aggregation, or the attention.

mod prior;
mod train;

use std::sync::atomic::{AtomicBool, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Gumbel};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, SparseInput, Tape, Tensor, Var};
use crate::decompose::DEFAULT_MAX_PHRASES;
use crate::encoder::{
    culprit_attention_var, encode_sparse, self_select_var, uniform, EncoderConfig, EncoderWeights,
    FeatureVector,
};
use crate::error::{Error, Result};
use crate::logic::{Distribution3, Veracity};

pub use prior::{make_prior, sample_culprits, NliPriorRow, NliPriorTable, PriorKind, PriorSource, PriorSpec};
pub use train::{example_loss, train, Adam, EpochLog, TrainConfig, TrainExample, TrainLog};

/// Probability floor inside every logarithm and KL term.
pub const PROB_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub d_label: usize,
    pub max_phrases: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        ModelConfig {
            d_label: encoder.d,
            encoder,
            max_phrases: DEFAULT_MAX_PHRASES,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.d_label == 0 || self.max_phrases == 0 {
            return Err(Error::validation("d_label and max_phrases must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ModelIds {
    enc: EncoderWeights,
    labels: ParamId,
    q_hidden_w: ParamId,
    q_hidden_b: ParamId,
    q_out_b: ParamId,
    p_hidden_w: ParamId,
    p_hidden_b: ParamId,
    p_out_b: ParamId,
}

/// All trainable weights with their configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    ids: ModelIds,
}

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = EncoderWeights::init(&mut store, &config.encoder, &mut rng);
        let (d, dl, m) = (config.encoder.d, config.d_label, config.max_phrases);
        let q_in = dl + 2 * d;
        let p_in = 3 * m + 2 * d;
        let labels = store.add("labels", uniform(3, dl, (1.0 / dl as f64).sqrt(), &mut rng));
        let q_hidden_w = store.add("q.hidden.w", uniform(dl, q_in, (1.0 / q_in as f64).sqrt(), &mut rng));
        let q_hidden_b = store.add("q.hidden.b", Tensor::zeros(dl, 1));
        let q_out_b = store.add("q.out.b", Tensor::zeros(3, 1));
        let p_hidden_w = store.add("p.hidden.w", uniform(dl, p_in, (1.0 / p_in as f64).sqrt(), &mut rng));
        let p_hidden_b = store.add("p.hidden.b", Tensor::zeros(dl, 1));
        let p_out_b = store.add("p.out.b", Tensor::zeros(3, 1));
        Ok(ModelParams {
            config,
            store,
            ids: ModelIds {
                enc,
                labels,
                q_hidden_w,
                q_hidden_b,
                q_out_b,
                p_hidden_w,
                p_hidden_b,
                p_out_b,
            },
        })
    }

    /// Rebinds a deserialized store, checking every tensor's shape against a
    /// freshly initialized model of the same configuration.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let reference = ModelParams::init(config.clone(), 0)?;
        if reference.store.names != store.names {
            return Err(Error::validation("checkpoint parameter names do not match the model"));
        }
        for (name, (a, b)) in store
            .names
            .iter()
            .zip(reference.store.tensors.iter().zip(&store.tensors))
        {
            if (a.rows, a.cols) != (b.rows, b.cols) || b.data.len() != b.rows * b.cols {
                return Err(Error::validation(format!("checkpoint tensor {name} has the wrong shape")));
            }
        }
        if !store.all_finite() {
            return Err(Error::numeric("checkpoint contains non-finite weights"));
        }
        let enc = EncoderWeights::bind(&store).expect("names verified");
        let id = |n: &str| store.id(n).expect("names verified");
        let ids = ModelIds {
            enc,
            labels: id("labels"),
            q_hidden_w: id("q.hidden.w"),
            q_hidden_b: id("q.hidden.b"),
            q_out_b: id("q.out.b"),
            p_hidden_w: id("p.hidden.w"),
            p_hidden_b: id("p.hidden.b"),
            p_out_b: id("p.out.b"),
        };
        Ok(ModelParams { config, store, ids })
    }

    pub fn encoder_weights(&self) -> &EncoderWeights {
        &self.ids.enc
    }

    pub fn d(&self) -> usize {
        self.config.encoder.d
    }
}

/// Sparse encoder inputs of one record: the `(claim, evidence)` pair and one
/// `(claim, local premise)` pair per phrase.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordInput {
    pub global: SparseInput,
    pub locals: Vec<SparseInput>,
}

impl RecordInput {
    pub fn n_phrases(&self) -> usize {
        self.locals.len()
    }
}

/// Per-slot latent distributions padded to `max_phrases`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub z: Vec<Distribution3>,
    pub mask: Vec<bool>,
}

impl LatentState {
    pub fn new(active: Vec<Distribution3>, max_phrases: usize) -> Result<Self> {
        if active.len() > max_phrases {
            return Err(Error::validation(format!(
                "{} latent slots exceed max_phrases {max_phrases}",
                active.len()
            )));
        }
        let n = active.len();
        let mut z = active;
        z.resize(max_phrases, Distribution3::UNIFORM);
        let mask = (0..max_phrases).map(|i| i < n).collect();
        Ok(LatentState { z, mask })
    }

    pub fn active(&self) -> impl Iterator<Item = &Distribution3> {
        self.z.iter().zip(&self.mask).filter(|(_, m)| **m).map(|(z, _)| z)
    }

    pub fn n_active(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn argmax(&self) -> Vec<Veracity> {
        self.active().map(Distribution3::argmax).collect()
    }

    /// One-hot of every active slot's argmax.
    pub fn discretized(&self) -> LatentState {
        LatentState {
            z: self
                .z
                .iter()
                .zip(&self.mask)
                .map(|(d, m)| if *m { Distribution3::one_hot(d.argmax()) } else { *d })
                .collect(),
            mask: self.mask.clone(),
        }
    }
}

/// Tape handles for an encoded record.
pub struct Encoded {
    pub h_global: Var,
    pub h_locals: Vec<Var>,
    pub h_local: Var,
    pub alpha: Option<Var>,
}

/// Global vector through the gate, local vectors, and the attention pool.
pub fn encode_record(tape: &mut Tape, model: &ModelParams, input: &RecordInput) -> Encoded {
    let w = &model.ids.enc;
    let hg = encode_sparse(tape, &model.store, w.global, input.global.clone());
    let h_global = self_select_var(tape, &model.store, w, hg);
    let h_locals: Vec<Var> = input
        .locals
        .iter()
        .map(|x| encode_sparse(tape, &model.store, w.local, x.clone()))
        .collect();
    if h_locals.is_empty() {
        let h_local = tape.constant(vec![0.0; model.d()]);
        return Encoded {
            h_global,
            h_locals,
            h_local,
            alpha: None,
        };
    }
    let (h_local, alpha) = culprit_attention_var(tape, &model.store, w, h_global, &h_locals);
    Encoded {
        h_global,
        h_locals,
        h_local,
        alpha: Some(alpha),
    }
}

fn head(tape: &mut Tape, model: &ModelParams, w: ParamId, b: ParamId, out_b: ParamId, x: Var) -> Var {
    let wv = tape.param(&model.store, w);
    let bv = tape.param(&model.store, b);
    let pre = tape.matvec(wv, x);
    let pre = tape.add(pre, bv);
    let hidden = tape.tanh(pre);
    let labels = tape.param(&model.store, model.ids.labels);
    let logits = tape.matvec(labels, hidden);
    let ob = tape.param(&model.store, out_b);
    let logits = tape.add(logits, ob);
    tape.softmax(logits)
}

/// `q(z_i | y, x)` over `[label_embedding(y); h_i; h_global]`.
pub fn posterior_q_var(tape: &mut Tape, model: &ModelParams, y: Veracity, h_i: Var, h_global: Var) -> Var {
    let labels = tape.param(&model.store, model.ids.labels);
    let emb = tape.row(labels, model.config.d_label, y.index());
    let x = tape.concat(&[emb, h_i, h_global]);
    let ids = model.ids;
    head(tape, model, ids.q_hidden_w, ids.q_hidden_b, ids.q_out_b, x)
}

/// `p(y | z, x)` over `[z_1; …; z_max; h_global; h_local]`, padding absent
/// slots with zeros.
pub fn classifier_p_var(tape: &mut Tape, model: &ModelParams, z: &[Var], h_global: Var, h_local: Var) -> Var {
    let max = model.config.max_phrases;
    assert!(z.len() <= max, "more latent slots than max_phrases");
    let mut parts: Vec<Var> = z.to_vec();
    if z.len() < max {
        parts.push(tape.constant(vec![0.0; 3 * (max - z.len())]));
    }
    parts.push(h_global);
    parts.push(h_local);
    let x = tape.concat(&parts);
    let ids = model.ids;
    head(tape, model, ids.p_hidden_w, ids.p_hidden_b, ids.p_out_b, x)
}

fn dist_of(tape: &Tape, v: Var) -> Distribution3 {
    let s = tape.value(v);
    Distribution3::from_simplex([s[0], s[1], s[2]])
}

/// Posterior over every active slot of a record given label `y`.
pub fn posterior_q(
    y: Veracity,
    h_locals: &[FeatureVector],
    mask: &[bool],
    h_global: &FeatureVector,
    model: &ModelParams,
) -> Result<LatentState> {
    let mut tape = Tape::new();
    let hg = tape.constant(h_global.0.clone());
    let mut active = Vec::new();
    for (h, m) in h_locals.iter().zip(mask) {
        if *m {
            let hi = tape.constant(h.0.clone());
            let q = posterior_q_var(&mut tape, model, y, hi, hg);
            active.push(dist_of(&tape, q));
        }
    }
    LatentState::new(active, model.config.max_phrases)
}

/// Claim distribution from a discretized latent state.
pub fn classifier_p(
    z: &LatentState,
    h_global: &FeatureVector,
    h_local: &FeatureVector,
    model: &ModelParams,
) -> Distribution3 {
    let mut tape = Tape::new();
    let zs: Vec<Var> = z
        .active()
        .map(|d| tape.constant(d.as_array().to_vec()))
        .collect();
    let hg = tape.constant(h_global.0.clone());
    let hl = tape.constant(h_local.0.clone());
    let p = classifier_p_var(&mut tape, model, &zs, hg, hl);
    dist_of(&tape, p)
}

/// How a Gumbel-perturbed distribution is turned into a latent sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Discretize {
    /// One-hot forward, tempered-softmax backward.
    StraightThrough,
    /// Tempered softmax in both passes (used for gradient checking).
    Relaxed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GumbelSample {
    pub one_hot: [f64; 3],
    pub soft: [f64; 3],
    pub label: Veracity,
}

pub fn gumbel_noise(rng: &mut impl Rng) -> [f64; 3] {
    let g = Gumbel::new(0.0, 1.0).expect("standard Gumbel");
    [g.sample(rng), g.sample(rng), g.sample(rng)]
}

fn perturbed_logits(d: &[f64], noise: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|k| d[k].max(PROB_FLOOR).ln() + noise[k])
}

fn argmax3(x: &[f64; 3]) -> usize {
    let mut best = 0;
    for k in 1..3 {
        if x[k] > x[best] {
            best = k;
        }
    }
    best
}

/// Gumbel-max sample of `d` with its tempered-softmax surrogate.
pub fn gumbel_discretize(d: &Distribution3, temperature: f64, rng: &mut impl Rng) -> Result<GumbelSample> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::validation(format!("gumbel temperature {temperature} must be positive")));
    }
    Ok(gumbel_from_noise(&d.as_array(), gumbel_noise(rng), temperature))
}

pub(crate) fn gumbel_from_noise(d: &[f64], noise: [f64; 3], temperature: f64) -> GumbelSample {
    let logits = perturbed_logits(d, noise);
    let k = argmax3(&logits);
    let mut one_hot = [0.0; 3];
    one_hot[k] = 1.0;
    let soft = crate::autodiff::softmax(&logits.map(|l| l / temperature));
    GumbelSample {
        one_hot,
        soft: [soft[0], soft[1], soft[2]],
        label: Veracity::ALL[k],
    }
}

/// Tape version of [`gumbel_discretize`] with externally drawn noise.
pub fn gumbel_var(tape: &mut Tape, q: Var, noise: [f64; 3], temperature: f64, mode: Discretize) -> Var {
    let logq = tape.log_floor(q, PROB_FLOOR);
    let g = tape.constant(noise.to_vec());
    let logits = tape.add(logq, g);
    let tempered = tape.scale(logits, 1.0 / temperature);
    let soft = tape.softmax(tempered);
    match mode {
        Discretize::Relaxed => soft,
        Discretize::StraightThrough => {
            let lv = tape.value(logits);
            let k = argmax3(&[lv[0], lv[1], lv[2]]);
            let mut hard = vec![0.0; 3];
            hard[k] = 1.0;
            tape.straight_through(hard, soft)
        }
    }
}

static FLOOR_WARNED: AtomicBool = AtomicBool::new(false);

fn warn_floor(what: &str) {
    if !FLOOR_WARNED.swap(true, Ordering::Relaxed) {
        log::warn!("{what} has zero mass where the other side does not; KL is floored at {PROB_FLOOR:e}");
    }
}

/// `KL(a ‖ b)` for a fixed target `b`.
pub fn kl_to_const(tape: &mut Tape, a: Var, b: [f64; 3]) -> Var {
    let av = tape.value(a);
    if (0..3).any(|k| b[k] <= 0.0 && av[k] > 0.0) {
        warn_floor("KL target");
    }
    let loga = tape.log_floor(a, PROB_FLOOR);
    let logb = tape.constant(b.iter().map(|v| v.max(PROB_FLOOR).ln()).collect());
    let diff = tape.sub(loga, logb);
    tape.dot(a, diff)
}

/// `KL(a ‖ b)` with gradients into both sides.
pub fn kl_var(tape: &mut Tape, a: Var, b: Var) -> Var {
    let loga = tape.log_floor(a, PROB_FLOOR);
    let logb = tape.log_floor(b, PROB_FLOOR);
    let diff = tape.sub(loga, logb);
    tape.dot(a, diff)
}

/// Product t-norm aggregation on the tape.
pub fn soft_aggregate_var(tape: &mut Tape, qs: &[Var]) -> Var {
    assert!(!qs.is_empty(), "soft aggregation over zero slots");
    let mut sup = tape.index(qs[0], 0);
    let r0 = tape.index(qs[0], 1);
    let mut not_ref = tape.const_minus(1.0, r0);
    for &q in &qs[1..] {
        let s = tape.index(q, 0);
        sup = tape.mul(sup, s);
        let r = tape.index(q, 1);
        let nr = tape.const_minus(1.0, r);
        not_ref = tape.mul(not_ref, nr);
    }
    let refute = tape.const_minus(1.0, not_ref);
    let nei = tape.sub(not_ref, sup);
    tape.concat(&[sup, refute, nei])
}

/// How the per-slot prior KL terms of the ELBO are combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlReduction {
    #[default]
    Sum,
    /// Divides the summed KL by the number of active slots, so long claims
    /// are not held closer to their prior than short ones.
    Mean,
}

impl KlReduction {
    fn weight(self, n_slots: usize) -> f64 {
        match self {
            KlReduction::Mean if n_slots > 0 => 1.0 / n_slots as f64,
            _ => 1.0,
        }
    }
}

pub fn elbo_var(
    tape: &mut Tape,
    y_star: Veracity,
    qs: &[Var],
    prior: &[Distribution3],
    p_out: Var,
    reduction: KlReduction,
) -> Var {
    assert_eq!(qs.len(), prior.len(), "posterior and prior slots misaligned");
    let py = tape.index(p_out, y_star.index());
    let logp = tape.log_floor(py, PROB_FLOOR);
    let mut loss = tape.scale(logp, -1.0);
    let w = reduction.weight(qs.len());
    for (q, pr) in qs.iter().zip(prior) {
        let kl = kl_to_const(tape, *q, pr.as_array());
        let kl = tape.scale(kl, w);
        loss = tape.add(loss, kl);
    }
    loss
}

fn kl3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3)
        .map(|k| a[k] * (a[k].max(PROB_FLOOR).ln() - b[k].max(PROB_FLOOR).ln()))
        .sum()
}

/// Negative ELBO for one record given the classifier output under a sample.
pub fn elbo_loss(
    y_star: Veracity,
    q_state: &LatentState,
    prior_state: &LatentState,
    p_out: &Distribution3,
) -> Result<f64> {
    elbo_loss_with(y_star, q_state, prior_state, p_out, KlReduction::Sum)
}

pub fn elbo_loss_with(
    y_star: Veracity,
    q_state: &LatentState,
    prior_state: &LatentState,
    p_out: &Distribution3,
    reduction: KlReduction,
) -> Result<f64> {
    if q_state.mask != prior_state.mask {
        return Err(Error::validation("posterior and prior active slots differ"));
    }
    let nll = -p_out.prob(y_star).max(PROB_FLOOR).ln();
    let kl: f64 = q_state
        .active()
        .zip(prior_state.active())
        .map(|(q, p)| kl3(&q.as_array(), &p.as_array()))
        .sum();
    Ok(nll + kl * reduction.weight(q_state.n_active()))
}

/// `KL(p_out ‖ teacher)`.
pub fn distillation_loss(p_out: &Distribution3, teacher: &Distribution3) -> f64 {
    kl3(&p_out.as_array(), &teacher.as_array())
}

pub fn final_loss(lambda: f64, l_var: f64, l_logic: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::validation(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok((1.0 - lambda) * l_var + lambda * l_logic)
}

/// Scalar parts of a record's loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub elbo: f64,
    pub logic: f64,
}

/// Randomness consumed by one record's training loss.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordNoise {
    pub gumbel: Vec<[f64; 3]>,
}

impl RecordNoise {
    pub fn draw(n: usize, rng: &mut impl Rng) -> Self {
        RecordNoise {
            gumbel: (0..n).map(|_| gumbel_noise(rng)).collect(),
        }
    }
}

/// Scalar settings of the training objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub lambda: f64,
    pub temperature: f64,
    pub kl_reduction: KlReduction,
}

/// Records the full training objective for one example on `tape`.
///
/// `prior_for` receives the attention weights (empty when the record has no
/// phrases) and returns the prior over the active slots.
#[allow(clippy::too_many_arguments)]
pub fn record_loss_var(
    tape: &mut Tape,
    model: &ModelParams,
    input: &RecordInput,
    y_star: Veracity,
    objective: &Objective,
    noise: &RecordNoise,
    mode: Discretize,
    prior_for: impl FnOnce(&[f64]) -> Result<Vec<Distribution3>>,
) -> Result<(Var, LossParts)> {
    let enc = encode_record(tape, model, input);
    let alphas: Vec<f64> = enc.alpha.map(|a| tape.value(a).to_vec()).unwrap_or_default();
    let prior = prior_for(&alphas)?;
    let qs: Vec<Var> = enc
        .h_locals
        .iter()
        .map(|&h| posterior_q_var(tape, model, y_star, h, enc.h_global))
        .collect();
    let zs: Vec<Var> = qs
        .iter()
        .zip(&noise.gumbel)
        .map(|(&q, &g)| gumbel_var(tape, q, g, objective.temperature, mode))
        .collect();
    let p_out = classifier_p_var(tape, model, &zs, enc.h_global, enc.h_local);
    let elbo = elbo_var(tape, y_star, &qs, &prior, p_out, objective.kl_reduction);
    let logic = if qs.is_empty() {
        tape.constant(vec![0.0])
    } else {
        let teacher = soft_aggregate_var(tape, &qs);
        kl_var(tape, p_out, teacher)
    };
    let a = tape.scale(elbo, 1.0 - objective.lambda);
    let b = tape.scale(logic, objective.lambda);
    let total = tape.add(a, b);
    let parts = LossParts {
        total: tape.scalar(total),
        elbo: tape.scalar(elbo),
        logic: tape.scalar(logic),
    };
    Ok((total, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logic::soft_aggregate;
    use approx::assert_abs_diff_eq;

    fn d(a: f64, b: f64, c: f64) -> Distribution3 {
        Distribution3::new(a, b, c).unwrap()
    }

    fn small_model() -> ModelParams {
        let encoder = EncoderConfig {
            d: 6,
            n_hash_buckets: 32,
            ..EncoderConfig::default()
        };
        ModelParams::init(
            ModelConfig {
                encoder,
                d_label: 5,
                max_phrases: 4,
            },
            11,
        )
        .unwrap()
    }

    fn fv(seed: f64, n: usize) -> FeatureVector {
        FeatureVector((0..n).map(|i| ((i as f64 + seed) * 1.3).sin() * 0.7).collect())
    }

    #[test]
    fn elbo_examples() {
        let st = LatentState::new(vec![d(0.2, 0.5, 0.3), d(0.6, 0.1, 0.3)], 8).unwrap();
        let sure = Distribution3::one_hot(Veracity::Ref);
        assert_abs_diff_eq!(elbo_loss(Veracity::Ref, &st, &st, &sure).unwrap(), 0.0, epsilon = 1e-12);
        let l = elbo_loss(Veracity::Ref, &st, &st, &Distribution3::UNIFORM).unwrap();
        assert_abs_diff_eq!(l, 3f64.ln(), epsilon = 1e-12);
        let prior = LatentState::new(vec![d(0.4, 0.3, 0.3), d(0.1, 0.1, 0.8)], 8).unwrap();
        assert!(elbo_loss(Veracity::Sup, &st, &prior, &sure).unwrap() > elbo_loss(Veracity::Sup, &st, &st, &sure).unwrap());
        let other = LatentState::new(vec![d(1.0, 0.0, 0.0)], 8).unwrap();
        assert!(elbo_loss(Veracity::Sup, &st, &other, &sure).is_err());
        let summed = elbo_loss(Veracity::Ref, &st, &prior, &sure).unwrap();
        let mean = elbo_loss_with(Veracity::Ref, &st, &prior, &sure, KlReduction::Mean).unwrap();
        assert_abs_diff_eq!(mean, summed / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_prior_mass_is_floored() {
        let q = LatentState::new(vec![d(0.5, 0.5, 0.0)], 8).unwrap();
        let prior = LatentState::new(vec![d(1.0, 0.0, 0.0)], 8).unwrap();
        let l = elbo_loss(Veracity::Sup, &q, &prior, &Distribution3::one_hot(Veracity::Sup)).unwrap();
        assert!(l.is_finite() && l > 0.0);
        assert_abs_diff_eq!(l, 0.5 * 0.5f64.ln() + 0.5 * (0.5f64.ln() - PROB_FLOOR.ln()), epsilon = 1e-12);
    }

    #[test]
    fn distillation_examples() {
        let t = d(0.3, 0.3, 0.4);
        assert_abs_diff_eq!(distillation_loss(&t, &t), 0.0, epsilon = 1e-15);
        let l = distillation_loss(&Distribution3::one_hot(Veracity::Sup), &d(0.5, 0.5, 0.0));
        assert_abs_diff_eq!(l, 2f64.ln(), epsilon = 1e-12);
        assert!(distillation_loss(&d(0.1, 0.6, 0.3), &t) >= 0.0);
    }

    #[test]
    fn final_loss_examples() {
        assert_eq!(final_loss(0.0, 2.0, 4.0).unwrap(), 2.0);
        assert_eq!(final_loss(1.0, 2.0, 4.0).unwrap(), 4.0);
        assert_eq!(final_loss(0.5, 2.0, 4.0).unwrap(), 3.0);
        assert!(final_loss(1.5, 2.0, 4.0).is_err());
    }

    #[test]
    fn gumbel_degenerate_and_cold_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let s = gumbel_discretize(&Distribution3::one_hot(Veracity::Sup), 1.0, &mut rng).unwrap();
            assert_eq!(s.one_hot, [1.0, 0.0, 0.0]);
        }
        let noise = gumbel_noise(&mut rng);
        let p = [0.2, 0.5, 0.3];
        let cold = gumbel_from_noise(&p, noise, 1e-4);
        for k in 0..3 {
            assert_abs_diff_eq!(cold.soft[k], cold.one_hot[k], epsilon = 1e-6);
        }
        assert!(gumbel_discretize(&Distribution3::UNIFORM, 0.0, &mut rng).is_err());
    }

    #[test]
    fn straight_through_forward_is_one_hot_backward_is_soft() {
        let mut s = ParamStore::new();
        let id = s.add("q", Tensor { rows: 3, cols: 1, data: vec![0.2, 0.5, 0.3] });
        let noise = [0.1, -0.4, 0.9];
        let grads = |mode| {
            let mut t = Tape::new();
            let q = t.param(&s, id);
            let z = gumbel_var(&mut t, q, noise, 0.7, mode);
            let w = t.constant(vec![1.0, -2.0, 0.5]);
            let out = t.dot(z, w);
            let mut g = s.zero_grads();
            t.backward(out, &mut g);
            (t.value(z).to_vec(), g.get(id).to_vec())
        };
        let (hard, g_st) = grads(Discretize::StraightThrough);
        let (soft, g_relaxed) = grads(Discretize::Relaxed);
        assert_eq!(hard.iter().filter(|v| **v == 1.0).count(), 1);
        assert_eq!(hard.iter().sum::<f64>(), 1.0);
        assert!(soft.iter().all(|v| *v > 0.0 && *v < 1.0));
        assert_eq!(g_st, g_relaxed);
    }

    #[test]
    fn soft_aggregate_tape_matches_logic() {
        let ds = [d(0.6, 0.2, 0.2), d(0.9, 0.0, 0.1), d(0.3, 0.3, 0.4)];
        let mut t = Tape::new();
        let vs: Vec<Var> = ds.iter().map(|x| t.constant(x.as_array().to_vec())).collect();
        let agg = soft_aggregate_var(&mut t, &vs);
        let want = soft_aggregate(&ds).unwrap().as_array();
        for (got, want) in t.value(agg).iter().zip(want) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-15);
        }
    }

    #[test]
    fn heads_are_simplices_and_deterministic() {
        let m = small_model();
        let locals = vec![fv(1.0, 6), fv(2.0, 6), fv(3.0, 6)];
        let mask = [true, true, false];
        let hg = fv(4.0, 6);
        let q = posterior_q(Veracity::Ref, &locals, &mask, &hg, &m).unwrap();
        assert_eq!(q.n_active(), 2);
        assert_eq!(q.z.len(), 4);
        for z in q.active() {
            assert_abs_diff_eq!(z.as_array().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
        assert_eq!(q, posterior_q(Veracity::Ref, &locals, &mask, &hg, &m).unwrap());

        let disc = q.discretized();
        let p = classifier_p(&disc, &hg, &fv(5.0, 6), &m);
        assert_abs_diff_eq!(p.as_array().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert_eq!(p, classifier_p(&disc, &hg, &fv(5.0, 6), &m));

        let mut altered = disc.clone();
        altered.z[3] = d(0.1, 0.1, 0.8);
        assert_eq!(p, classifier_p(&altered, &hg, &fv(5.0, 6), &m));
    }

    #[test]
    fn lambda_zero_ignores_distillation() {
        let m = small_model();
        let cfg = &m.config.encoder;
        let input = RecordInput {
            global: crate::encoder::featurize_pair("Alice won", "Alice lost the cup", 256, cfg),
            locals: vec![
                crate::encoder::featurize_pair("Alice won", "Alice won", 128, cfg),
                crate::encoder::featurize_pair("Alice won", "Alice lost", 128, cfg),
            ],
        };
        let noise = RecordNoise::draw(2, &mut ChaCha8Rng::seed_from_u64(1));
        let uniform = |_: &[f64]| Ok(vec![Distribution3::UNIFORM; 2]);
        let run = |lambda: f64, elbo_only: bool| {
            let mut t = Tape::new();
            let obj = Objective { lambda, temperature: 0.5, kl_reduction: KlReduction::Mean };
            let (total, _) = record_loss_var(&mut t, &m, &input, Veracity::Ref, &obj, &noise, Discretize::StraightThrough, uniform).unwrap();
            let mut g = m.store.zero_grads();
            if elbo_only {
                // Rebuild with only the ELBO term as the root.
                let mut t2 = Tape::new();
                let enc = encode_record(&mut t2, &m, &input);
                let qs: Vec<Var> = enc.h_locals.iter().map(|&h| posterior_q_var(&mut t2, &m, Veracity::Ref, h, enc.h_global)).collect();
                let zs: Vec<Var> = qs.iter().zip(&noise.gumbel).map(|(&q, &n)| gumbel_var(&mut t2, q, n, 0.5, Discretize::StraightThrough)).collect();
                let p = classifier_p_var(&mut t2, &m, &zs, enc.h_global, enc.h_local);
                let e = elbo_var(&mut t2, Veracity::Ref, &qs, &[Distribution3::UNIFORM; 2], p, KlReduction::Mean);
                t2.backward(e, &mut g);
            } else {
                t.backward(total, &mut g);
            }
            g
        };
        let with_zero = run(0.0, false);
        let elbo = run(0.0, true);
        for (a, b) in with_zero.0.iter().flatten().zip(elbo.0.iter().flatten()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-14);
        }
        assert!(run(0.5, false) != with_zero);
    }

    #[test]
    fn checkpoint_rebinding_checks_shapes() {
        let m = small_model();
        let again = ModelParams::from_store(m.config.clone(), m.store.clone()).unwrap();
        assert_eq!(again, m);
        let mut broken = m.store.clone();
        broken.tensors[0].rows += 1;
        assert!(ModelParams::from_store(m.config.clone(), broken).is_err());
    }
}
