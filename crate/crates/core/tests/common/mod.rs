#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use veracity::autodiff::{Grads, ParamStore, Tape, Var};
use veracity::encoder::{culprit_attention_var, featurize_pair, self_select_var, EncoderConfig};
use veracity::latent::{
    record_loss_var, Discretize, KlReduction, ModelConfig, ModelParams, Objective, RecordInput, RecordNoise,
};
use veracity::logic::{Distribution3, Veracity};

pub const FD_STEP: f64 = 1e-5;

pub fn toy_model(d: usize, seed: u64) -> ModelParams {
    let encoder = EncoderConfig {
        d,
        n_hash_buckets: 48,
        ngram_orders: vec![1, 2],
        global_token_cap: 64,
        local_token_cap: 32,
    };
    let config = ModelConfig {
        encoder,
        d_label: d,
        max_phrases: 4,
    };
    ModelParams::init(config, seed).unwrap()
}

pub fn toy_input(model: &ModelParams) -> RecordInput {
    let cfg = &model.config.encoder;
    let claim = "Ann Lee founded Acme in Oslo";
    RecordInput {
        global: featurize_pair(claim, "Ann Lee founded Borealis in Oslo. Oslo is known for its bridges.", 64, cfg),
        locals: vec![
            featurize_pair(claim, "Ann Lee founded Acme in Oslo", 32, cfg),
            featurize_pair(claim, "Ann Lee founded Borealis in Oslo", 32, cfg),
            featurize_pair(claim, "Ann Lee joined Acme in Oslo", 32, cfg),
        ],
    }
}

pub fn toy_prior() -> Vec<Distribution3> {
    vec![
        Distribution3::new(0.7, 0.2, 0.1).unwrap(),
        Distribution3::new(0.2, 0.6, 0.2).unwrap(),
        Distribution3::new(0.3, 0.3, 0.4).unwrap(),
    ]
}

/// Maximum relative error between tape gradients and central differences of
/// `f` over every parameter scalar. Entries where both are below `1e-9` in
/// magnitude are compared absolutely.
pub fn max_relative_error(store: &ParamStore, f: impl Fn(&ParamStore, &mut Tape) -> Var) -> f64 {
    let mut tape = Tape::new();
    let root = f(store, &mut tape);
    let mut grads = store.zero_grads();
    tape.backward(root, &mut grads);
    let Grads(analytic) = grads;
    let eval = |s: &ParamStore| {
        let mut t = Tape::new();
        let r = f(s, &mut t);
        t.scalar(r)
    };
    let mut worst: f64 = 0.0;
    let mut work = store.clone();
    for (pi, g) in analytic.iter().enumerate() {
        let id = veracity::autodiff::ParamId(pi);
        for (k, &gk) in g.iter().enumerate() {
            let orig = work.get(id).data[k];
            work.get_mut(id).data[k] = orig + FD_STEP;
            let up = eval(&work);
            work.get_mut(id).data[k] = orig - FD_STEP;
            let down = eval(&work);
            work.get_mut(id).data[k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let scale = gk.abs().max(numeric.abs());
            let err = if scale < 1e-9 {
                (gk - numeric).abs()
            } else {
                (gk - numeric).abs() / scale
            };
            worst = worst.max(err);
        }
    }
    worst
}

/// `(name, max relative error)` for each differentiable objective of a small
/// `d`-dimensional model, with relaxed sampling and fixed noise.
pub fn gradient_report(d: usize) -> Vec<(&'static str, f64)> {
    let model = toy_model(d, 11);
    let input = toy_input(&model);
    let noise = RecordNoise::draw(input.locals.len(), &mut ChaCha8Rng::seed_from_u64(5));
    let objective = |lambda: f64, kl: KlReduction| {
        let model = &model;
        let input = &input;
        let noise = &noise;
        move |store: &ParamStore, tape: &mut Tape| {
            let m = ModelParams::from_store(model.config.clone(), store.clone()).unwrap();
            let obj = Objective {
                lambda,
                temperature: 0.7,
                kl_reduction: kl,
            };
            record_loss_var(tape, &m, input, Veracity::Ref, &obj, noise, Discretize::Relaxed, |_| Ok(toy_prior()))
                .unwrap()
                .0
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let weights: Vec<f64> = (0..3 * d + 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let consts = |tape: &mut Tape, rows: usize| -> Vec<Var> {
        (0..rows)
            .map(|r| tape.constant((0..d).map(|c| ((r * d + c) as f64 * 0.37).sin() * 0.8).collect()))
            .collect()
    };
    let w = *model.encoder_weights();
    let attention = {
        let weights = weights.clone();
        move |store: &ParamStore, tape: &mut Tape| {
            let vs = consts(tape, 4);
            let (pooled, alpha) = culprit_attention_var(tape, store, &w, vs[0], &vs[1..]);
            let joint = tape.concat(&[pooled, alpha]);
            let c = tape.constant(weights[..d + 3].to_vec());
            tape.dot(joint, c)
        }
    };
    let select = move |store: &ParamStore, tape: &mut Tape| {
        let vs = consts(tape, 1);
        let out = self_select_var(tape, store, &w, vs[0]);
        let c = tape.constant(weights[..d].to_vec());
        tape.dot(out, c)
    };
    vec![
        ("elbo_loss", max_relative_error(&model.store, objective(0.0, KlReduction::Sum))),
        ("elbo_loss (mean KL)", max_relative_error(&model.store, objective(0.0, KlReduction::Mean))),
        ("distillation_loss", max_relative_error(&model.store, objective(1.0, KlReduction::Sum))),
        ("final_loss", max_relative_error(&model.store, objective(0.5, KlReduction::Mean))),
        ("culprit_attention", max_relative_error(&model.store, attention)),
        ("self_select", max_relative_error(&model.store, select)),
    ]
}

/// Independent span scorer: every span of at most `max_len` word tokens is
/// scored by position-weighted agreement of its neighbors with the tokens
/// around the mask. Returns the best span text, earliest then shortest on
/// ties.
pub fn brute_force_best_span(cloze: &str, evidence: &str, max_len: usize, window: usize) -> String {
    fn words(s: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut cur = String::new();
        for ch in s.chars() {
            if ch.is_alphanumeric() || ch == '[' || ch == ']' {
                cur.push(ch);
            } else {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                if !ch.is_whitespace() {
                    out.push(ch.to_string());
                }
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
        out
    }
    let q: Vec<String> = words(cloze).iter().map(|w| w.to_lowercase()).collect();
    let e_orig = words(evidence);
    let e: Vec<String> = e_orig.iter().map(|w| w.to_lowercase()).collect();
    let m = q.iter().position(|w| w == "[mask]").expect("cloze has a mask");
    let mut best: Option<(f64, usize, usize)> = None;
    for s in 0..e.len() {
        for t in s + 1..=(s + max_len).min(e.len()) {
            if !e[t - 1].chars().any(char::is_alphanumeric) {
                break;
            }
            let mut score = 0.0;
            for j in 1..=window {
                if m >= j && s >= j && q[m - j] == e[s - j] {
                    score += 1.0 / j as f64;
                }
                if m + j < q.len() && t + j - 1 < e.len() && q[m + j] == e[t + j - 1] {
                    score += 1.0 / j as f64;
                }
            }
            let better = match best {
                None => score > 0.0,
                Some((b, _, _)) => score > b,
            };
            if better {
                best = Some((score, s, t));
            }
        }
    }
    let (_, s, t) = best.expect("some span scores");
    e_orig[s..t].join(" ")
}

pub fn sparse(pairs: &[(usize, f64)]) -> veracity::autodiff::SparseInput {
    Arc::new(pairs.to_vec())
}
