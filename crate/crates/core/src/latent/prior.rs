use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution as _, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logic::{Distribution3, Veracity};

use super::LatentState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    /// Per-phrase triples read from a file.
    #[serde(alias = "external_nli")]
    Nli,
    /// Label-consistent peaked triples with sampled culprits.
    #[serde(alias = "pseudo_logical")]
    Pseudo,
    Uniform,
}

impl std::str::FromStr for PriorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nli" | "external_nli" => Ok(PriorKind::Nli),
            "pseudo" | "pseudo_logical" => Ok(PriorKind::Pseudo),
            "uniform" => Ok(PriorKind::Uniform),
            other => Err(Error::validation(format!("unknown prior kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for PriorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PriorKind::Nli => "nli",
            PriorKind::Pseudo => "pseudo",
            PriorKind::Uniform => "uniform",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub kind: PriorKind,
    pub source: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kind == PriorKind::Nli && self.source.is_none() {
            return Err(Error::validation("the nli prior requires a source file"));
        }
        Ok(())
    }

    /// Loads whatever data the prior needs.
    pub fn resolve(&self) -> Result<PriorSource> {
        self.validate()?;
        Ok(match self.kind {
            PriorKind::Uniform => PriorSource::Uniform,
            PriorKind::Pseudo => PriorSource::Pseudo,
            PriorKind::Nli => PriorSource::Nli(NliPriorTable::load(self.source.as_ref().expect("validated"))?),
        })
    }
}

/// One line of the prior file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NliPriorRow {
    #[serde(deserialize_with = "crate::dataset::deserialize_id")]
    pub record_id: String,
    pub phrase_index: usize,
    pub p_ref: f64,
    pub p_nei: f64,
    pub p_sup: f64,
}

impl NliPriorRow {
    pub fn new(record_id: impl Into<String>, phrase_index: usize, d: Distribution3) -> Self {
        NliPriorRow {
            record_id: record_id.into(),
            phrase_index,
            p_ref: d.refute(),
            p_nei: d.nei(),
            p_sup: d.sup(),
        }
    }

    pub fn distribution(&self) -> Result<Distribution3> {
        Distribution3::new(self.p_sup, self.p_ref, self.p_nei)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NliPriorTable {
    entries: HashMap<(String, usize), Distribution3>,
}

impl NliPriorTable {
    pub fn from_rows(rows: impl IntoIterator<Item = NliPriorRow>) -> Result<Self> {
        let mut entries = HashMap::new();
        for row in rows {
            let d = row.distribution()?;
            if entries.insert((row.record_id.clone(), row.phrase_index), d).is_some() {
                return Err(Error::validation(format!(
                    "duplicate prior entry for record {} phrase {}",
                    row.record_id, row.phrase_index
                )));
            }
        }
        Ok(NliPriorTable { entries })
    }

    pub fn from_reader(reader: impl BufRead, origin: &Path) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(origin, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: NliPriorRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            row.distribution().map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            rows.push(row);
        }
        Self::from_rows(rows)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(BufReader::new(f), path)
    }

    pub fn get(&self, record_id: &str, phrase_index: usize) -> Option<Distribution3> {
        self.entries.get(&(record_id.to_string(), phrase_index)).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A resolved prior ready for use in training.
#[derive(Debug, Clone, PartialEq)]
pub enum PriorSource {
    Uniform,
    Pseudo,
    Nli(NliPriorTable),
}

impl PriorSource {
    pub fn kind(&self) -> PriorKind {
        match self {
            PriorSource::Uniform => PriorKind::Uniform,
            PriorSource::Pseudo => PriorKind::Pseudo,
            PriorSource::Nli(_) => PriorKind::Nli,
        }
    }
}

const PEAK: f64 = 0.8;
const OFF_PEAK: f64 = 0.1;

fn peaked(label: Veracity) -> Distribution3 {
    let mut p = [OFF_PEAK; 3];
    p[label.index()] = PEAK;
    Distribution3::from_simplex(p)
}

/// Draws `count` distinct slots with probability proportional to `weights`.
/// Non-positive or non-finite weight vectors fall back to uniform.
pub fn sample_culprits(weights: &[f64], count: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut w: Vec<f64> = weights
        .iter()
        .map(|x| if x.is_finite() && *x > 0.0 { *x } else { 0.0 })
        .collect();
    let mut chosen = Vec::with_capacity(count);
    for _ in 0..count.min(w.len()) {
        let i = match WeightedIndex::new(&w) {
            Ok(dist) => dist.sample(rng),
            Err(_) => {
                let open: Vec<usize> = (0..w.len()).filter(|i| !chosen.contains(i)).collect();
                open[rng.gen_range(0..open.len())]
            }
        };
        w[i] = 0.0;
        chosen.push(i);
    }
    chosen.sort_unstable();
    chosen
}

/// Prior over the phrases of one record.
///
/// `alphas` holds the attention weights over the record's phrases and is
/// only read by the pseudo prior.
pub fn make_prior(
    source: &PriorSource,
    record_id: &str,
    label: Veracity,
    n_phrases: usize,
    alphas: &[f64],
    max_phrases: usize,
    rng: &mut impl Rng,
) -> Result<LatentState> {
    let slots = match source {
        PriorSource::Uniform => vec![Distribution3::UNIFORM; n_phrases],
        PriorSource::Nli(table) => (0..n_phrases)
            .map(|i| {
                table.get(record_id, i).ok_or_else(|| {
                    Error::validation(format!("prior file has no entry for record {record_id} phrase {i}"))
                })
            })
            .collect::<Result<_>>()?,
        PriorSource::Pseudo => {
            if alphas.len() != n_phrases {
                return Err(Error::validation(format!(
                    "record {record_id}: {} attention weights for {n_phrases} phrases",
                    alphas.len()
                )));
            }
            let mut slots = vec![peaked(Veracity::Sup); n_phrases];
            let special = match label {
                Veracity::Sup => None,
                Veracity::Ref => Some((Veracity::Ref, rng.gen_range(1..=2usize))),
                Veracity::Nei => Some((Veracity::Nei, 1)),
            };
            if let Some((kind, count)) = special {
                for i in sample_culprits(alphas, count, rng) {
                    slots[i] = peaked(kind);
                }
            }
            slots
        }
    };
    LatentState::new(slots, max_phrases)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = make_prior(&PriorSource::Uniform, "r", Veracity::Ref, 3, &[], 8, &mut rng).unwrap();
        assert_eq!(s.active().copied().collect::<Vec<_>>(), vec![Distribution3::UNIFORM; 3]);
    }

    #[test]
    fn pseudo_prior_follows_the_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let alphas = [0.2, 0.5, 0.3];
        for _ in 0..200 {
            let sup = make_prior(&PriorSource::Pseudo, "r", Veracity::Sup, 3, &alphas, 8, &mut rng).unwrap();
            assert!(sup.argmax().iter().all(|v| *v == Veracity::Sup));
            let re = make_prior(&PriorSource::Pseudo, "r", Veracity::Ref, 3, &alphas, 8, &mut rng).unwrap();
            let n_ref = re.argmax().iter().filter(|v| **v == Veracity::Ref).count();
            assert!((1..=2).contains(&n_ref));
            assert!(re.argmax().iter().all(|v| *v != Veracity::Nei));
            let nei = make_prior(&PriorSource::Pseudo, "r", Veracity::Nei, 3, &alphas, 8, &mut rng).unwrap();
            assert_eq!(nei.argmax().iter().filter(|v| **v == Veracity::Nei).count(), 1);
        }
    }

    #[test]
    fn culprit_sampling_tracks_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| sample_culprits(&[0.9, 0.05, 0.05], 1, &mut rng) == vec![0])
            .count();
        assert!((hits as f64 / n as f64 - 0.9).abs() < 0.01);
        let two = sample_culprits(&[0.0, 0.0, 0.0], 2, &mut rng);
        assert_eq!(two.len(), 2);
        assert_ne!(two[0], two[1]);
    }

    #[test]
    fn nli_table_lookup_and_errors() {
        let text = r#"{"record_id": 7, "phrase_index": 0, "p_ref": 0.7, "p_nei": 0.2, "p_sup": 0.1}
{"record_id": "7", "phrase_index": 1, "p_ref": 0.1, "p_nei": 0.1, "p_sup": 0.8}
"#;
        let t = NliPriorTable::from_reader(text.as_bytes(), Path::new("p.jsonl")).unwrap();
        assert_eq!(t.len(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = make_prior(&PriorSource::Nli(t.clone()), "7", Veracity::Ref, 2, &[], 8, &mut rng).unwrap();
        assert_eq!(s.argmax(), vec![Veracity::Ref, Veracity::Sup]);
        let err = make_prior(&PriorSource::Nli(t), "8", Veracity::Ref, 1, &[], 8, &mut rng).unwrap_err();
        assert!(err.to_string().contains("record 8"));

        let bad = r#"{"record_id": "1", "phrase_index": 0, "p_ref": 0.7, "p_nei": 0.7, "p_sup": 0.1}"#;
        let err = NliPriorTable::from_reader(bad.as_bytes(), Path::new("p.jsonl")).unwrap_err();
        assert!(err.to_string().starts_with("p.jsonl:1:"));
        assert!(PriorSpec { kind: PriorKind::Nli, source: None, seed: None }.validate().is_err());
    }
}
