//! JSON-lines ingestion of labeled claims with pre-retrieved evidence.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::{DeserializeOwned, Deserializer};
use serde::{Deserialize, Serialize, Serializer};

use crate::decompose::ClaimPhrase;
use crate::error::{Error, Result};
use crate::logic::Veracity;
use crate::premise::{EvidenceSentence, EvidenceSet};

/// Accepts a JSON string or integer and yields its string form.
pub fn deserialize_id<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<String, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Id {
        S(String),
        I(i64),
        U(u64),
    }
    Ok(match Id::deserialize(d)? {
        Id::S(s) => s,
        Id::I(i) => i.to_string(),
        Id::U(u) => u.to_string(),
    })
}

mod fever_label {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Veracity, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(super::fever_label_str(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Veracity, D::Error> {
        let s = String::deserialize(d)?;
        super::parse_fever_label(&s).map_err(serde::de::Error::custom)
    }
}

pub fn fever_label_str(v: Veracity) -> &'static str {
    match v {
        Veracity::Sup => "SUPPORTS",
        Veracity::Ref => "REFUTES",
        Veracity::Nei => "NOT ENOUGH INFO",
    }
}

pub fn parse_fever_label(s: &str) -> Result<Veracity> {
    match s {
        "SUPPORTS" => Ok(Veracity::Sup),
        "REFUTES" => Ok(Veracity::Ref),
        "NOT ENOUGH INFO" => Ok(Veracity::Nei),
        other => Err(Error::validation(format!("unknown label `{other}`"))),
    }
}

/// A `(page_id, line_no)` evidence address.
pub type EvidenceKey = (String, i64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    #[serde(deserialize_with = "deserialize_id")]
    pub id: String,
    pub claim: String,
    #[serde(with = "fever_label")]
    pub label: Veracity,
    #[serde(default)]
    pub evidence_texts: Vec<EvidenceSentence>,
    #[serde(default)]
    pub gold_evidence: Vec<Vec<EvidenceKey>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phrases: Option<Vec<ClaimPhrase>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub culprits: Option<Vec<usize>>,
}

/// Raw line shape, which additionally admits the nested FEVER `evidence`
/// annotation arrays.
#[derive(Deserialize)]
struct RawRecord {
    #[serde(deserialize_with = "deserialize_id")]
    id: String,
    claim: String,
    #[serde(with = "fever_label")]
    label: Veracity,
    #[serde(default)]
    evidence_texts: Vec<EvidenceSentence>,
    #[serde(default)]
    gold_evidence: Option<Vec<Vec<EvidenceKey>>>,
    #[serde(default)]
    evidence: Option<Vec<Vec<FeverAnnotation>>>,
    #[serde(default)]
    phrases: Option<Vec<ClaimPhrase>>,
    #[serde(default)]
    culprits: Option<Vec<usize>>,
}

/// `[annotation_id, evidence_id, page | null, line | null]`
#[derive(Deserialize)]
struct FeverAnnotation(
    #[allow(dead_code)] serde_json::Value,
    #[allow(dead_code)] serde_json::Value,
    Option<String>,
    Option<i64>,
);

impl RawRecord {
    fn into_record(self) -> Result<InputRecord> {
        let gold_evidence = match (self.gold_evidence, self.evidence) {
            (Some(g), _) => g,
            (None, Some(raw)) => raw
                .into_iter()
                .map(|set| {
                    set.into_iter()
                        .filter_map(|FeverAnnotation(_, _, page, line)| Some((page?, line?)))
                        .collect::<Vec<_>>()
                })
                .filter(|set| !set.is_empty())
                .collect(),
            (None, None) => Vec::new(),
        };
        let rec = InputRecord {
            id: self.id,
            claim: self.claim,
            label: self.label,
            evidence_texts: self.evidence_texts,
            gold_evidence,
            phrases: self.phrases,
            culprits: self.culprits,
        };
        rec.validate()?;
        Ok(rec)
    }
}

impl InputRecord {
    pub fn validate(&self) -> Result<()> {
        if self.claim.trim().is_empty() {
            return Err(Error::validation(format!("record {}: empty claim", self.id)));
        }
        if let Some(c) = &self.culprits {
            if !c.is_empty() && self.label != Veracity::Ref {
                return Err(Error::validation(format!(
                    "record {}: culprits are only meaningful on REFUTES records",
                    self.id
                )));
            }
            if let Some(p) = &self.phrases {
                if let Some(bad) = c.iter().find(|&&i| i >= p.len()) {
                    return Err(Error::validation(format!(
                        "record {}: culprit {bad} out of range for {} phrases",
                        self.id,
                        p.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn evidence(&self) -> EvidenceSet {
        EvidenceSet::new(self.evidence_texts.clone())
    }

    /// Addresses of the supplied evidence sentences.
    pub fn retrieved(&self) -> BTreeSet<EvidenceKey> {
        self.evidence_texts
            .iter()
            .map(|s| (s.page_id.clone(), s.line_no))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    #[serde(rename = "SUP")]
    pub sup: usize,
    #[serde(rename = "REF")]
    pub refute: usize,
    #[serde(rename = "NEI")]
    pub nei: usize,
}

impl ClassCounts {
    pub fn of<'a>(labels: impl IntoIterator<Item = &'a Veracity>) -> Self {
        let mut c = ClassCounts::default();
        for l in labels {
            match l {
                Veracity::Sup => c.sup += 1,
                Veracity::Ref => c.refute += 1,
                Veracity::Nei => c.nei += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.sup + self.refute + self.nei
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<InputRecord>,
    pub counts: ClassCounts,
}

impl Dataset {
    pub fn new(records: Vec<InputRecord>) -> Self {
        let counts = ClassCounts::of(records.iter().map(|r| &r.label));
        Dataset { records, counts }
    }
}

pub fn parse_dataset(reader: impl BufRead, origin: &Path) -> Result<Dataset> {
    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message,
        };
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        let rec = raw.into_record().map_err(|e| at(e.to_string()))?;
        if !seen.insert(rec.id.clone()) {
            return Err(at(format!("duplicate record id {}", rec.id)));
        }
        records.push(rec);
    }
    Ok(Dataset::new(records))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(BufReader::new(f), path)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, items: impl IntoIterator<Item = &'a T>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_fixture_lines() {
        let text = r#"{"id": 1, "claim": "Ann won.", "label": "SUPPORTS", "evidence_texts": [{"page_id": "Ann", "line_no": 0, "text": "Ann won."}], "gold_evidence": [[["Ann", 0]]]}
{"id": "2", "claim": "Bo lost.", "label": "REFUTES", "evidence": [[[10, 20, "Bo", 3]], [[11, 21, "Bo", 4], [11, 22, "Cup", 1]]]}

{"id": 3, "claim": "Cy ran.", "label": "NOT ENOUGH INFO", "evidence": [[[12, null, null, null]]]}
"#;
        let ds = parse_dataset(text.as_bytes(), Path::new("f.jsonl")).unwrap();
        assert_eq!(ds.counts, ClassCounts { sup: 1, refute: 1, nei: 1 });
        assert_eq!(ds.records[0].id, "1");
        assert_eq!(
            ds.records[1].gold_evidence,
            vec![vec![("Bo".to_string(), 3)], vec![("Bo".to_string(), 4), ("Cup".to_string(), 1)]]
        );
        assert!(ds.records[2].gold_evidence.is_empty());
    }

    #[test]
    fn errors_name_the_line() {
        let text = "{\"id\": 1, \"claim\": \"A.\", \"label\": \"SUPPORTS\"}\n{\"id\": 2, \"claim\": \"B.\", \"label\": \"MAYBE\"}\n";
        let err = parse_dataset(text.as_bytes(), Path::new("x.jsonl")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.starts_with("x.jsonl:2:"), "{msg}");
        assert!(msg.contains("MAYBE"));
        let err = parse_dataset("{not json".as_bytes(), Path::new("y.jsonl")).unwrap_err();
        assert!(err.to_string().starts_with("y.jsonl:1:"));
        let dup = "{\"id\": 1, \"claim\": \"A.\", \"label\": \"SUPPORTS\"}\n{\"id\": \"1\", \"claim\": \"B.\", \"label\": \"SUPPORTS\"}\n";
        assert!(parse_dataset(dup.as_bytes(), Path::new("z")).is_err());
    }

    #[test]
    fn records_round_trip() {
        let text = r#"{"id": "a", "claim": "Ann won.", "label": "REFUTES", "culprits": [0], "phrases": [{"text": "Ann", "start": 0, "end": 3, "kind": "NE"}]}"#;
        let ds = parse_dataset(text.as_bytes(), Path::new("r")).unwrap();
        let line = serde_json::to_string(&ds.records[0]).unwrap();
        let again = parse_dataset(line.as_bytes(), Path::new("r")).unwrap();
        assert_eq!(ds, again);
        let bad = r#"{"id": "a", "claim": "Ann won.", "label": "SUPPORTS", "culprits": [0]}"#;
        assert!(parse_dataset(bad.as_bytes(), Path::new("r")).is_err());
    }
}
