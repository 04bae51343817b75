//! Text-pair encoder, self-selecting gate and culprit attention.
//!
//! A pair `(a, b)` is featurized as a hashed bag of word n-grams. Each n-gram
//! is emitted twice: verbatim with its side tag (`a1:paris`, `b2:in paris`)
//! and as a side-tagged match class (`a1:=` when the n-gram also occurs on the
//! other side, `a1:≠` otherwise). Bucket values are `ln(1 + count)`. A learned
//! projection followed by `tanh` maps the sparse vector to `R^d`.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, SparseInput, Tape, Tensor, Var};
use crate::text::tokenize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d: usize,
    pub n_hash_buckets: usize,
    pub ngram_orders: Vec<usize>,
    pub global_token_cap: usize,
    pub local_token_cap: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d: 16,
            n_hash_buckets: 4096,
            ngram_orders: vec![1, 2],
            global_token_cap: 256,
            local_token_cap: 128,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.d < 2 {
            return Err(crate::Error::validation("encoder dimension d must be at least 2"));
        }
        if self.n_hash_buckets == 0 || self.ngram_orders.is_empty() || self.ngram_orders.contains(&0) {
            return Err(crate::Error::validation(
                "encoder needs buckets and positive n-gram orders",
            ));
        }
        if self.global_token_cap > 256 || self.local_token_cap > 128 {
            return Err(crate::Error::validation(
                "token caps may not exceed 256 (global) and 128 (local)",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// FNV-1a, stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn ngrams(tokens: &[String], n: usize) -> Vec<String> {
    if tokens.len() < n {
        return Vec::new();
    }
    tokens.windows(n).map(|w| w.join(" ")).collect()
}

/// Hashed, match-tagged n-gram features of the pair, truncated to `cap`
/// tokens in total (side `a` first).
pub fn featurize_pair(a: &str, b: &str, cap: usize, config: &EncoderConfig) -> SparseInput {
    let lower = |s: &str| -> Vec<String> { tokenize(s).iter().map(|t| t.lower()).collect() };
    let mut ta = lower(a);
    let mut tb = lower(b);
    ta.truncate(cap);
    tb.truncate(cap - ta.len());

    let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
    let mut emit = |feature: &str| {
        let bucket = (fnv1a(feature.as_bytes()) % config.n_hash_buckets as u64) as usize;
        *counts.entry(bucket).or_default() += 1.0;
    };
    for &n in &config.ngram_orders {
        let ga = ngrams(&ta, n);
        let gb = ngrams(&tb, n);
        let sa: HashSet<&str> = ga.iter().map(String::as_str).collect();
        let sb: HashSet<&str> = gb.iter().map(String::as_str).collect();
        for (side, grams, other) in [("a", &ga, &sb), ("b", &gb, &sa)] {
            for g in grams {
                emit(&format!("{side}{n}:{g}"));
                let class = if other.contains(g.as_str()) { "=" } else { "≠" };
                emit(&format!("{side}{n}:{class}"));
            }
        }
    }
    Arc::new(counts.into_iter().map(|(k, c)| (k, c.ln_1p())).collect())
}

/// Weight and bias of a sparse-input projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Projection {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Encoder-side parameters inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderWeights {
    pub global: Projection,
    pub local: Projection,
    pub gate_w: ParamId,
    pub gate_b: ParamId,
    /// `1 × 2d` attention scorer.
    pub attention: ParamId,
}

pub(crate) fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Tensor {
    Tensor {
        rows,
        cols,
        data: (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect(),
    }
}

impl EncoderWeights {
    pub fn init(store: &mut ParamStore, config: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let (d, nb) = (config.d, config.n_hash_buckets);
        let proj_scale = 0.1;
        let projection = |store: &mut ParamStore, name: &str, rng: &mut _| Projection {
            weight: store.add(format!("{name}.w"), uniform(d, nb, proj_scale, rng)),
            bias: store.add(format!("{name}.b"), Tensor::zeros(d, 1)),
        };
        let global = projection(store, "enc_global", rng);
        let local = projection(store, "enc_local", rng);
        let gscale = (1.0 / d as f64).sqrt();
        EncoderWeights {
            global,
            local,
            gate_w: store.add("gate.w", uniform(d, d, gscale, rng)),
            gate_b: store.add("gate.b", Tensor::zeros(d, 1)),
            attention: store.add("attention.w", uniform(1, 2 * d, gscale, rng)),
        }
    }

    /// Looks the weights up by name in a loaded store.
    pub fn bind(store: &ParamStore) -> Option<Self> {
        Some(EncoderWeights {
            global: Projection {
                weight: store.id("enc_global.w")?,
                bias: store.id("enc_global.b")?,
            },
            local: Projection {
                weight: store.id("enc_local.w")?,
                bias: store.id("enc_local.b")?,
            },
            gate_w: store.id("gate.w")?,
            gate_b: store.id("gate.b")?,
            attention: store.id("attention.w")?,
        })
    }
}

pub fn encode_sparse(tape: &mut Tape, store: &ParamStore, proj: Projection, x: SparseInput) -> Var {
    let pre = tape.sparse_affine(store, proj.weight, proj.bias, x);
    tape.tanh(pre)
}

/// `σ(W_g h + b_g) ⊙ h`
pub fn self_select_var(tape: &mut Tape, store: &ParamStore, w: &EncoderWeights, h: Var) -> Var {
    let gw = tape.param(store, w.gate_w);
    let gb = tape.param(store, w.gate_b);
    let lin = tape.matvec(gw, h);
    let lin = tape.add(lin, gb);
    let gate = tape.sigmoid(lin);
    tape.mul(gate, h)
}

/// Softmax attention over local vectors scored against the global vector,
/// followed by `tanh` of the weighted sum. Returns the pooled vector and the
/// attention weights as a single vector node.
pub fn culprit_attention_var(
    tape: &mut Tape,
    store: &ParamStore,
    w: &EncoderWeights,
    h_global: Var,
    h_locals: &[Var],
) -> (Var, Var) {
    assert!(!h_locals.is_empty(), "culprit attention needs at least one local vector");
    let wa = tape.param(store, w.attention);
    let scores: Vec<Var> = h_locals
        .iter()
        .map(|&h| {
            let joint = tape.concat(&[h_global, h]);
            tape.dot(wa, joint)
        })
        .collect();
    let scores = tape.concat(&scores);
    let alpha = tape.softmax(scores);
    let mut pooled: Option<Var> = None;
    for (i, &h) in h_locals.iter().enumerate() {
        let ai = tape.index(alpha, i);
        let term = tape.scale_by(h, ai);
        pooled = Some(match pooled {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    let pooled = tape.tanh(pooled.expect("non-empty"));
    (pooled, alpha)
}

/// Encodes `(text_a, text_b)` with the given projection.
pub fn encode_pair(
    text_a: &str,
    text_b: &str,
    store: &ParamStore,
    proj: Projection,
    cap: usize,
    config: &EncoderConfig,
) -> FeatureVector {
    let x = featurize_pair(text_a, text_b, cap, config);
    let mut tape = Tape::new();
    let h = encode_sparse(&mut tape, store, proj, x);
    FeatureVector(tape.value(h).to_vec())
}

pub fn self_select(h: &FeatureVector, store: &ParamStore, w: &EncoderWeights) -> FeatureVector {
    let mut tape = Tape::new();
    let hv = tape.constant(h.0.clone());
    let out = self_select_var(&mut tape, store, w, hv);
    FeatureVector(tape.value(out).to_vec())
}

/// Attention over the unmasked locals (`mask[i] == true` marks a real slot).
/// Weights are reported for real slots only, in order.
pub fn culprit_attention(
    h_global: &FeatureVector,
    h_locals: &[FeatureVector],
    mask: &[bool],
    store: &ParamStore,
    w: &EncoderWeights,
) -> (FeatureVector, Vec<f64>) {
    assert_eq!(h_locals.len(), mask.len());
    let mut tape = Tape::new();
    let hg = tape.constant(h_global.0.clone());
    let locals: Vec<Var> = h_locals
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(h, _)| tape.constant(h.0.clone()))
        .collect();
    let (pooled, alpha) = culprit_attention_var(&mut tape, store, w, hg, &locals);
    (FeatureVector(tape.value(pooled).to_vec()), tape.value(alpha).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d: usize) -> (ParamStore, EncoderWeights, EncoderConfig) {
        let config = EncoderConfig {
            d,
            n_hash_buckets: 64,
            ..EncoderConfig::default()
        };
        let mut store = ParamStore::new();
        let w = EncoderWeights::init(&mut store, &config, &mut ChaCha8Rng::seed_from_u64(3));
        (store, w, config)
    }

    #[test]
    fn encode_is_deterministic_with_fixed_shape() {
        let (store, w, config) = setup(8);
        let a = encode_pair("Donald Trump won.", "Donald Trump lost.", &store, w.local, 128, &config);
        let b = encode_pair("Donald Trump won.", "Donald Trump lost.", &store, w.local, 128, &config);
        assert_eq!(a, b);
        assert_eq!(a.dim(), 8);
    }

    #[test]
    fn zero_projection_gives_zero_vector() {
        let (mut store, w, config) = setup(8);
        store.get_mut(w.local.weight).data.fill(0.0);
        let h = encode_pair("a b c", "d e", &store, w.local, 128, &config);
        assert!(h.0.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn match_classes_separate_identical_and_changed_pairs() {
        let config = EncoderConfig::default();
        let same = featurize_pair("Alice won", "Alice won", 128, &config);
        let diff = featurize_pair("Alice won", "Alice lost", 128, &config);
        let bucket = |f: &str| (fnv1a(f.as_bytes()) % config.n_hash_buckets as u64) as usize;
        let has = |x: &SparseInput, f: &str| x.iter().any(|(k, _)| *k == bucket(f));
        assert!(!has(&same, "a1:≠"));
        assert!(has(&diff, "a1:≠") && has(&diff, "b1:≠"));
    }

    #[test]
    fn token_cap_truncates_b_first() {
        let config = EncoderConfig::default();
        let long_b = "x ".repeat(300);
        let capped = featurize_pair("a b", &long_b, 4, &config);
        let shorter = featurize_pair("a b", "x x", 4, &config);
        assert_eq!(capped, shorter);
    }

    #[test]
    fn gate_limits() {
        let (mut store, w, _) = setup(4);
        let h = FeatureVector(vec![0.4, -0.8, 0.1, 0.0]);
        store.get_mut(w.gate_w).data.fill(0.0);
        let out = self_select(&h, &store, &w);
        for (o, x) in out.0.iter().zip(&h.0) {
            assert!((o - 0.5 * x).abs() < 1e-15);
        }
        assert!(self_select(&FeatureVector(vec![0.0; 4]), &store, &w).0.iter().all(|v| *v == 0.0));
        store.get_mut(w.gate_b).data.fill(50.0);
        let sat = self_select(&h, &store, &w);
        for (o, x) in sat.0.iter().zip(&h.0) {
            assert!((o - x).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_basic_contracts() {
        let (store, w, _) = setup(4);
        let hg = FeatureVector(vec![0.1, 0.2, -0.3, 0.4]);
        let h1 = FeatureVector(vec![0.5, -0.1, 0.0, 0.2]);
        let (_, a) = culprit_attention(&hg, std::slice::from_ref(&h1), &[true], &store, &w);
        assert_eq!(a, [1.0]);
        let (_, a) = culprit_attention(&hg, &[h1.clone(), h1.clone()], &[true, true], &store, &w);
        assert!((a[0] - 0.5).abs() < 1e-15 && (a[1] - 0.5).abs() < 1e-15);
        let h2 = FeatureVector(vec![-0.9, 0.3, 0.7, 0.1]);
        let (pooled, a) = culprit_attention(&hg, &[h1.clone(), h2.clone()], &[true, true], &store, &w);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let pad = FeatureVector(vec![9.0; 4]);
        let (pooled2, a2) = culprit_attention(&hg, &[h1, h2, pad], &[true, true, false], &store, &w);
        assert_eq!(pooled, pooled2);
        assert_eq!(a, a2);
    }
}
