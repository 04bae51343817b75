//! Flat run configuration loaded from TOML with per-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decode::{DecodeConfig, DEFAULT_MAX_ITERS};
use crate::decompose::DEFAULT_MAX_PHRASES;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::latent::{KlReduction, ModelConfig, PriorKind, PriorSpec, TrainConfig};
use crate::premise::DEFAULT_TOP_K;

/// Every tunable of a run. Unset optional keys fall back to derived values:
/// `d_label` to `d`, `prior_source` to a prior derived from the premises.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub temperature: f64,
    pub validation_fraction: f64,
    pub kl_reduction: KlReduction,
    pub d: usize,
    pub d_label: Option<usize>,
    pub n_hash_buckets: usize,
    pub ngram_orders: Vec<usize>,
    pub global_token_cap: usize,
    pub local_token_cap: usize,
    pub max_phrases: usize,
    pub top_k: usize,
    /// Probability of masking each local premise slot.
    pub mask_rate: f64,
    pub max_iters: usize,
    pub prior: PriorKind,
    pub prior_source: Option<PathBuf>,
    /// Answers from an external reader, keyed by question id.
    pub answers_file: Option<PathBuf>,
    /// Verb list for phrase extraction; the bundled list when unset.
    pub verb_lexicon: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let e = EncoderConfig::default();
        RunConfig {
            seed: t.seed,
            lambda: t.lambda,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            temperature: t.temperature,
            validation_fraction: t.validation_fraction,
            kl_reduction: t.kl_reduction,
            d: e.d,
            d_label: None,
            n_hash_buckets: e.n_hash_buckets,
            ngram_orders: e.ngram_orders,
            global_token_cap: e.global_token_cap,
            local_token_cap: e.local_token_cap,
            max_phrases: DEFAULT_MAX_PHRASES,
            top_k: DEFAULT_TOP_K,
            mask_rate: 0.0,
            max_iters: DEFAULT_MAX_ITERS,
            prior: PriorKind::Nli,
            prior_source: None,
            answers_file: None,
            verb_lexicon: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::validation(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    /// Overrides one key; `value` is read as a TOML value, or as a bare
    /// string when it does not parse as one.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let mut table = toml::Table::try_from(&*self).expect("flat config serializes");
        table.insert(key.to_string(), parsed);
        let updated: RunConfig = table
            .try_into()
            .map_err(|e| Error::validation(format!("config key `{key}`: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<'a>(&mut self, pairs: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for pair in pairs {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::validation(format!("override `{pair}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.model_config().validate()?;
        if self.top_k == 0 {
            return Err(Error::validation("top_k must be positive"));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::validation("mask_rate must lie in [0, 1]"));
        }
        if self.max_iters == 0 {
            return Err(Error::validation("max_iters must be positive"));
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            d: self.d,
            n_hash_buckets: self.n_hash_buckets,
            ngram_orders: self.ngram_orders.clone(),
            global_token_cap: self.global_token_cap,
            local_token_cap: self.local_token_cap,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder_config(),
            d_label: self.d_label.unwrap_or(self.d),
            max_phrases: self.max_phrases,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lambda: self.lambda,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            temperature: self.temperature,
            seed: self.seed,
            validation_fraction: self.validation_fraction,
            kl_reduction: self.kl_reduction,
        }
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            max_iters: self.max_iters,
            seed: self.seed,
        }
    }

    pub fn prior_spec(&self) -> PriorSpec {
        PriorSpec {
            kind: self.prior,
            source: self.prior_source.clone(),
            seed: Some(self.seed),
        }
    }
}
