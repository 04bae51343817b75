//! Label, evidence, aggregation, faithfulness and culprit metrics.
//!
//! Records without phrases have no aggregate verdict; they count as misses
//! for the aggregated accuracy and agreement ratios.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::dataset::{EvidenceKey, InputRecord};
use crate::decode::VerificationResult;
use crate::error::{Error, Result};
use crate::logic::{hard_aggregate, soft_aggregate, Veracity};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldRecord {
    pub gold_label: Veracity,
    pub gold_evidence_sets: Vec<BTreeSet<EvidenceKey>>,
    pub culprit_indices: Option<BTreeSet<usize>>,
}

impl GoldRecord {
    pub fn from_input(r: &InputRecord) -> Self {
        GoldRecord {
            gold_label: r.label,
            gold_evidence_sets: r.gold_evidence.iter().map(|s| s.iter().cloned().collect()).collect(),
            culprit_indices: r.culprits.as_ref().map(|c| c.iter().copied().collect()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Hard,
    Soft,
}

fn aligned(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::validation(format!("{a} results for {b} gold records")));
    }
    if a == 0 {
        return Err(Error::validation("metrics over zero records"));
    }
    Ok(())
}

fn ratio<T>(items: &[T], hit: impl Fn(&T) -> bool) -> f64 {
    items.iter().filter(|x| hit(x)).count() as f64 / items.len() as f64
}

pub fn label_accuracy(results: &[VerificationResult], golds: &[GoldRecord]) -> Result<f64> {
    aligned(results.len(), golds.len())?;
    let pairs: Vec<_> = results.iter().zip(golds).collect();
    Ok(ratio(&pairs, |(r, g)| r.label == g.gold_label))
}

/// Label accuracy that also requires one gold evidence set to be fully
/// retrieved, except on NEI records.
pub fn fever_score(
    results: &[VerificationResult],
    retrieved: &[BTreeSet<EvidenceKey>],
    golds: &[GoldRecord],
) -> Result<f64> {
    aligned(results.len(), golds.len())?;
    aligned(retrieved.len(), golds.len())?;
    let rows: Vec<_> = results.iter().zip(retrieved).zip(golds).collect();
    Ok(ratio(&rows, |((r, ret), g)| {
        r.label == g.gold_label
            && (g.gold_label == Veracity::Nei || g.gold_evidence_sets.iter().any(|s| s.is_subset(ret)))
    }))
}

/// Aggregate verdict of the phrase latents, recomputed from `z`.
pub fn aggregated_label(r: &VerificationResult, mode: Mode) -> Option<Veracity> {
    if r.z.is_empty() {
        return None;
    }
    match mode {
        Mode::Hard => {
            let labels: Vec<Veracity> = r.z.iter().map(|d| d.argmax()).collect();
            hard_aggregate(&labels).ok()
        }
        Mode::Soft => soft_aggregate(&r.z).ok().map(|d| d.argmax()),
    }
}

pub fn aggregated_label_accuracy(results: &[VerificationResult], golds: &[GoldRecord], mode: Mode) -> Result<f64> {
    aligned(results.len(), golds.len())?;
    let pairs: Vec<_> = results.iter().zip(golds).collect();
    Ok(ratio(&pairs, |(r, g)| aggregated_label(r, mode) == Some(g.gold_label)))
}

/// Share of records whose aggregated phrase verdict equals the final label.
pub fn agreement(results: &[VerificationResult], mode: Mode) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::validation("metrics over zero records"));
    }
    Ok(ratio(results, |r| aggregated_label(r, mode) == Some(r.label)))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Culpa {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
    /// Gold-REF records with culprit annotations that were scored.
    pub n_records: usize,
    /// Gold-REF records skipped for lacking annotations.
    pub n_skipped: usize,
}

/// Micro-averaged culprit precision, recall and F1 over annotated gold-REF
/// records. Precision is 0 when nothing is predicted.
pub fn culpa(results: &[VerificationResult], golds: &[GoldRecord]) -> Result<Culpa> {
    aligned(results.len(), golds.len())?;
    let (mut tp, mut n_pred, mut n_gold) = (0usize, 0usize, 0usize);
    let mut out = Culpa::default();
    for (r, g) in results.iter().zip(golds) {
        if g.gold_label != Veracity::Ref {
            continue;
        }
        let Some(gold) = &g.culprit_indices else {
            out.n_skipped += 1;
            continue;
        };
        out.n_records += 1;
        let pred: BTreeSet<usize> = r
            .z
            .iter()
            .enumerate()
            .filter(|(_, d)| d.argmax() == Veracity::Ref)
            .map(|(i, _)| i)
            .collect();
        tp += pred.intersection(gold).count();
        n_pred += pred.len();
        n_gold += gold.len();
    }
    out.p = if n_pred == 0 { 0.0 } else { tp as f64 / n_pred as f64 };
    out.r = if n_gold == 0 { 0.0 } else { tp as f64 / n_gold as f64 };
    out.f1 = if out.p + out.r == 0.0 { 0.0 } else { 2.0 * out.p * out.r / (out.p + out.r) };
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub la: f64,
    pub fev: f64,
    pub la_z_hard: f64,
    pub la_z_soft: f64,
    pub agree_hard: f64,
    pub agree_soft: f64,
    pub culpa: Culpa,
}

pub fn evaluate(
    results: &[VerificationResult],
    retrieved: &[BTreeSet<EvidenceKey>],
    golds: &[GoldRecord],
) -> Result<MetricReport> {
    Ok(MetricReport {
        la: label_accuracy(results, golds)?,
        fev: fever_score(results, retrieved, golds)?,
        la_z_hard: aggregated_label_accuracy(results, golds, Mode::Hard)?,
        la_z_soft: aggregated_label_accuracy(results, golds, Mode::Soft)?,
        agree_hard: agreement(results, Mode::Hard)?,
        agree_soft: agreement(results, Mode::Soft)?,
        culpa: culpa(results, golds)?,
    })
}

/// Pairs results with dataset records by id, in dataset order.
pub fn align_by_id<'a>(
    results: &'a [VerificationResult],
    records: &'a [InputRecord],
) -> Result<Vec<(&'a VerificationResult, &'a InputRecord)>> {
    let by_id: std::collections::HashMap<&str, &VerificationResult> =
        results.iter().map(|r| (r.record_id.as_str(), r)).collect();
    records
        .iter()
        .map(|rec| {
            by_id
                .get(rec.id.as_str())
                .map(|r| (*r, rec))
                .ok_or_else(|| Error::validation(format!("no result for record {}", rec.id)))
        })
        .collect()
}
