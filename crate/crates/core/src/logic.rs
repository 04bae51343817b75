//! Three-valued veracity algebra.
//!
//! A claim is refuted as soon as one phrase is refuted, supported only when
//! every phrase is supported, and not-enough-info otherwise. [`hard_aggregate`]
//! implements that rule over discrete labels; [`soft_aggregate`] is its
//! product t-norm relaxation over per-phrase distributions:
//!
//! ```text
//! p(SUP) = Π_i q_i(SUP)
//! p(REF) = 1 − Π_i (1 − q_i(REF))
//! p(NEI) = 1 − p(SUP) − p(REF)
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Components below this are treated as rounding noise and clamped to zero.
pub const CLAMP_TOLERANCE: f64 = 1e-9;
/// Maximum deviation of a raw triple's sum from one.
pub const SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Veracity {
    #[serde(rename = "SUP")]
    Sup,
    #[serde(rename = "REF")]
    Ref,
    #[serde(rename = "NEI")]
    Nei,
}

impl Veracity {
    pub const ALL: [Veracity; 3] = [Veracity::Sup, Veracity::Ref, Veracity::Nei];

    /// Position of this label in a [`Distribution3`] triple.
    pub fn index(self) -> usize {
        match self {
            Veracity::Sup => 0,
            Veracity::Ref => 1,
            Veracity::Nei => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Veracity> {
        Veracity::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Veracity::Sup => "SUP",
            Veracity::Ref => "REF",
            Veracity::Nei => "NEI",
        }
    }
}

impl fmt::Display for Veracity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Veracity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "SUP" => Ok(Veracity::Sup),
            "REF" => Ok(Veracity::Ref),
            "NEI" => Ok(Veracity::Nei),
            other => Err(Error::validation(format!("unknown veracity `{other}`"))),
        }
    }
}

/// A probability distribution over `[SUP, REF, NEI]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct Distribution3([f64; 3]);

impl Distribution3 {
    pub const UNIFORM: Distribution3 = Distribution3([1.0 / 3.0; 3]);

    /// Validates and normalizes a raw triple, see [`normalize_guard`].
    pub fn new(sup: f64, refute: f64, nei: f64) -> Result<Self> {
        normalize_guard([sup, refute, nei])
    }

    pub fn one_hot(label: Veracity) -> Self {
        let mut p = [0.0; 3];
        p[label.index()] = 1.0;
        Distribution3(p)
    }

    /// Builds a distribution from values already known to lie on the simplex
    /// (e.g. a softmax output). Only rounding is repaired.
    pub(crate) fn from_simplex(p: [f64; 3]) -> Self {
        let p = p.map(|v| v.max(0.0));
        let s: f64 = p.iter().sum();
        Distribution3(p.map(|v| v / s))
    }

    pub fn sup(&self) -> f64 {
        self.0[0]
    }

    pub fn refute(&self) -> f64 {
        self.0[1]
    }

    pub fn nei(&self) -> f64 {
        self.0[2]
    }

    pub fn prob(&self, label: Veracity) -> f64 {
        self.0[label.index()]
    }

    pub fn as_array(&self) -> [f64; 3] {
        self.0
    }

    /// Most probable label; ties resolve in `SUP, REF, NEI` order.
    pub fn argmax(&self) -> Veracity {
        let mut best = 0;
        for i in 1..3 {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        Veracity::ALL[best]
    }
}

impl TryFrom<[f64; 3]> for Distribution3 {
    type Error = Error;

    fn try_from(p: [f64; 3]) -> Result<Self> {
        normalize_guard(p)
    }
}

impl From<Distribution3> for [f64; 3] {
    fn from(d: Distribution3) -> Self {
        d.0
    }
}

/// Repairs floating-point noise in a raw probability triple.
///
/// Components in `[-1e-9, 0)` are clamped to zero and the triple is rescaled
/// onto the simplex. Larger negatives, non-finite values, or a sum further
/// than `1e-6` from one are rejected.
pub fn normalize_guard(raw: [f64; 3]) -> Result<Distribution3> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("non-finite probability triple {raw:?}")));
    }
    if let Some(v) = raw.iter().find(|v| **v < -CLAMP_TOLERANCE) {
        return Err(Error::numeric(format!(
            "negative probability {v:e} in triple {raw:?}"
        )));
    }
    let sum: f64 = raw.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::numeric(format!(
            "probability triple {raw:?} sums to {sum}"
        )));
    }
    let clamped = raw.map(|v| v.max(0.0));
    let total: f64 = clamped.iter().sum();
    Ok(Distribution3(clamped.map(|v| v / total)))
}

/// Discrete aggregation: any REF wins, all-SUP gives SUP, anything else NEI.
pub fn hard_aggregate(labels: &[Veracity]) -> Result<Veracity> {
    if labels.is_empty() {
        return Err(Error::validation("hard_aggregate over zero phrases"));
    }
    if labels.contains(&Veracity::Ref) {
        Ok(Veracity::Ref)
    } else if labels.iter().all(|v| *v == Veracity::Sup) {
        Ok(Veracity::Sup)
    } else {
        Ok(Veracity::Nei)
    }
}

/// Product t-norm aggregation of per-phrase distributions.
pub fn soft_aggregate(dists: &[Distribution3]) -> Result<Distribution3> {
    if dists.is_empty() {
        return Err(Error::validation("soft_aggregate over zero phrases"));
    }
    let (sup, not_ref) = soft_aggregate_raw(dists.iter().map(|d| d.as_array()));
    normalize_guard([sup, 1.0 - not_ref, not_ref - sup])
}

/// Returns `(Π q_i(SUP), Π (1 − q_i(REF)))`. Factors are multiplied in
/// sorted order so the result is bitwise independent of input order.
pub(crate) fn soft_aggregate_raw(dists: impl IntoIterator<Item = [f64; 3]>) -> (f64, f64) {
    let (mut sup, mut not_ref): (Vec<f64>, Vec<f64>) = dists.into_iter().map(|d| (d[0], 1.0 - d[1])).unzip();
    sup.sort_by(f64::total_cmp);
    not_ref.sort_by(f64::total_cmp);
    (sup.iter().product(), not_ref.iter().product())
}
