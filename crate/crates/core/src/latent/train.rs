use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, ParamStore, Tape};
use crate::decode::{verify_input, DecodeConfig};
use crate::error::{Error, Result};
use crate::logic::Veracity;

use super::prior::{make_prior, PriorSource};
use super::{record_loss_var, Discretize, KlReduction, LossParts, ModelParams, Objective, RecordInput, RecordNoise};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub temperature: f64,
    pub seed: u64,
    /// Share of the training records held out for per-epoch validation.
    pub validation_fraction: f64,
    pub kl_reduction: KlReduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.5,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 20,
            temperature: 1.0,
            seed: 0,
            validation_fraction: 0.1,
            kl_reduction: KlReduction::Sum,
        }
    }
}

impl TrainConfig {
    pub fn objective(&self) -> Objective {
        Objective {
            lambda: self.lambda,
            temperature: self.temperature,
            kl_reduction: self.kl_reduction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::validation(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be positive"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::validation("temperature must be positive"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::validation("validation_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// One training record.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub id: String,
    pub input: RecordInput,
    pub label: Veracity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_elbo: f64,
    pub train_logic: f64,
    pub val_loss: Option<f64>,
    pub val_la: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub n_train: usize,
    pub n_validation: usize,
    pub epochs: Vec<EpochLog>,
}

/// Adaptive-moment optimizer.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Grads,
    v: Grads,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: store.zero_grads(),
            v: store.zero_grads(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, tensor) in store.tensors.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m.0[k], &mut self.v.0[k], &grads.0[k]);
            for j in 0..tensor.data.len() {
                if g[j] == 0.0 && m[j] == 0.0 {
                    continue;
                }
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                tensor.data[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Independent stream for `(seed, epoch, example)`.
pub(crate) fn example_rng(seed: u64, epoch: u64, example: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed ^ mix(epoch)) ^ example))
}

/// Loss and gradient of one example; `grads` is only filled when requested.
pub fn example_loss(
    model: &ModelParams,
    ex: &TrainExample,
    prior: &PriorSource,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    want_grads: bool,
) -> Result<(LossParts, Option<Grads>)> {
    let n = ex.input.n_phrases();
    let noise = RecordNoise::draw(n, rng);
    let max = model.config.max_phrases;
    let mut tape = Tape::new();
    let (root, parts) = record_loss_var(
        &mut tape,
        model,
        &ex.input,
        ex.label,
        &config.objective(),
        &noise,
        Discretize::StraightThrough,
        |alphas| {
            let state = make_prior(prior, &ex.id, ex.label, n, alphas, max, rng)?;
            Ok(state.active().copied().collect())
        },
    )?;
    if !parts.total.is_finite() {
        return Err(Error::numeric(format!(
            "non-finite loss on record {} (elbo {}, logic {})",
            ex.id, parts.elbo, parts.logic
        )));
    }
    let grads = want_grads.then(|| {
        let mut g = model.store.zero_grads();
        tape.backward(root, &mut g);
        g
    });
    Ok((parts, grads))
}

fn split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed ^ 0x5157)));
    let n_val = if fraction > 0.0 && n >= 2 {
        ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let val = order.split_off(n - n_val);
    (order, val)
}

/// Mini-batch training on the final loss. Gradients of a batch are computed
/// in parallel and summed in batch order, so runs are reproducible.
pub fn train(
    mut model: ModelParams,
    examples: &[TrainExample],
    config: &TrainConfig,
    prior: &PriorSource,
) -> Result<(ModelParams, TrainLog)> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    let (train_idx, val_idx) = split(examples.len(), config.validation_fraction, config.seed);
    let mut adam = Adam::new(&model.store, config.learning_rate);
    let mut log = TrainLog {
        n_train: train_idx.len(),
        n_validation: val_idx.len(),
        epochs: Vec::new(),
    };
    for epoch in 0..config.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut example_rng(config.seed, epoch as u64, u64::MAX));
        let mut sums = LossParts::default();
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let results: Vec<Result<(LossParts, Option<Grads>)>> = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = example_rng(config.seed, epoch as u64, i as u64);
                    example_loss(&model, &examples[i], prior, config, &mut rng, true)
                })
                .collect();
            let mut total = model.store.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            for r in results {
                let (parts, g) = r.map_err(|e| match e {
                    Error::Numeric(m) => Error::numeric(format!("epoch {epoch} batch {b}: {m}")),
                    other => other,
                })?;
                total.add_scaled(&g.expect("requested"), scale);
                sums.total += parts.total;
                sums.elbo += parts.elbo;
                sums.logic += parts.logic;
            }
            if !total.0.iter().flatten().all(|v| v.is_finite()) {
                return Err(Error::numeric(format!("epoch {epoch} batch {b}: non-finite gradient")));
            }
            adam.step(&mut model.store, &total);
            if !model.store.all_finite() {
                return Err(Error::numeric(format!("epoch {epoch} batch {b}: parameters diverged")));
            }
        }
        let n = train_idx.len() as f64;
        let (val_loss, val_la) = if val_idx.is_empty() {
            (None, None)
        } else {
            let (loss, la) = validate(&model, examples, &val_idx, config, prior)?;
            (Some(loss), Some(la))
        };
        let entry = EpochLog {
            epoch: epoch + 1,
            train_loss: sums.total / n,
            train_elbo: sums.elbo / n,
            train_logic: sums.logic / n,
            val_loss,
            val_la,
        };
        log::info!(
            "epoch {} loss {:.4} (elbo {:.4}, logic {:.4}) val_la {}",
            entry.epoch,
            entry.train_loss,
            entry.train_elbo,
            entry.train_logic,
            entry.val_la.map_or("-".to_string(), |v| format!("{v:.4}"))
        );
        log.epochs.push(entry);
    }
    Ok((model, log))
}

fn validate(
    model: &ModelParams,
    examples: &[TrainExample],
    idx: &[usize],
    config: &TrainConfig,
    prior: &PriorSource,
) -> Result<(f64, f64)> {
    let decode = DecodeConfig {
        seed: config.seed,
        ..DecodeConfig::default()
    };
    let rows: Vec<Result<(f64, bool)>> = idx
        .par_iter()
        .map(|&i| {
            let ex = &examples[i];
            let mut rng = example_rng(config.seed, u64::MAX, i as u64);
            let (parts, _) = example_loss(model, ex, prior, config, &mut rng, false)?;
            let result = verify_input(&ex.id, &ex.input, model, &decode)?;
            Ok((parts.total, result.label == ex.label))
        })
        .collect();
    let mut loss = 0.0;
    let mut hits = 0usize;
    for r in rows {
        let (l, hit) = r?;
        loss += l;
        hits += hit as usize;
    }
    let n = idx.len() as f64;
    Ok((loss / n, hits as f64 / n))
}
