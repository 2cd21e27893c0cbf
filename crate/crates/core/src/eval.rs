//! Re-identification, identity-swapping and attribute-agreement metrics over
//! embedding fixtures.
//!
//! A record *re-identifies* when its anonymized embedding verifies against any
//! gallery embedding of its own identity, and *swaps* when it verifies against
//! at least one gallery embedding of a different identity. Records whose
//! anonymized embedding is (numerically) zero cannot verify against anything
//! under cosine similarity; they count as non-matches and are tallied in
//! [`RateReport::degenerate`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{read_jsonl, GalleryItem};
use crate::tensor::norm;

const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Match when `cos(a, b) > threshold`.
    Cosine,
    /// Match when `|a - b|_2 < threshold`.
    L2,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "l2" => Ok(Self::L2),
            other => Err(Error::InvalidEval(format!("unknown metric {other:?}"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cosine => "cosine",
            Self::L2 => "l2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerificationConfig {
    pub metric: Metric,
    pub threshold: f64,
}

impl VerificationConfig {
    pub fn cosine(threshold: f64) -> Self {
        Self {
            metric: Metric::Cosine,
            threshold,
        }
    }

    pub fn l2(threshold: f64) -> Self {
        Self {
            metric: Metric::L2,
            threshold,
        }
    }

    /// Cosine 0.30 and 0.35, then l2 0.9, 1.0 and 1.1.
    pub fn standard_configs() -> [Self; 5] {
        [
            Self::cosine(0.30),
            Self::cosine(0.35),
            Self::l2(0.9),
            Self::l2(1.0),
            Self::l2(1.1),
        ]
    }

    /// True when `self` accepts a subset of what `other` accepts.
    pub fn is_stricter_or_equal(&self, other: &Self) -> bool {
        self.metric == other.metric
            && match self.metric {
                Metric::Cosine => self.threshold >= other.threshold,
                Metric::L2 => self.threshold <= other.threshold,
            }
    }
}

impl fmt::Display for VerificationConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.metric, self.threshold)
    }
}

fn check_dims(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    check_dims(a, b)?;
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(ab / (aa.sqrt() * bb.sqrt()))
}

pub fn l2_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    check_dims(a, b)?;
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt())
}

pub fn verify(a: &[f32], b: &[f32], cfg: &VerificationConfig) -> Result<bool> {
    Ok(match cfg.metric {
        Metric::Cosine => cosine_similarity(a, b)? > cfg.threshold,
        Metric::L2 => l2_distance(a, b)? < cfg.threshold,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub source_id: String,
    pub original_embedding: Vec<f32>,
    pub anonymized_embedding: Vec<f32>,
    #[serde(default)]
    pub attributes_original: BTreeMap<String, String>,
    #[serde(default)]
    pub attributes_anonymized: BTreeMap<String, String>,
}

impl EvalRecord {
    pub fn validate(&self) -> Result<()> {
        check_dims(&self.original_embedding, &self.anonymized_embedding)
    }
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<EvalRecord>> {
    let records: Vec<EvalRecord> = read_jsonl(path)?;
    records.iter().try_for_each(EvalRecord::validate)?;
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub config: VerificationConfig,
    /// Percentage in `[0, 100]`.
    pub rate: f64,
    pub matched: usize,
    pub evaluated: usize,
    /// Records with a zero anonymized embedding, counted as non-matches.
    pub degenerate: usize,
    /// Source ids with no same-identity gallery entry; their records are skipped.
    pub skipped: Vec<String>,
}

enum Outcome {
    Skipped,
    Evaluated { matched: bool, degenerate: bool },
}

#[derive(Clone, Copy)]
enum Target {
    SameId,
    OtherId,
}

fn rate(
    records: &[EvalRecord],
    gallery: &[GalleryItem],
    cfg: &VerificationConfig,
    target: Target,
) -> Result<RateReport> {
    if records.is_empty() {
        return Err(Error::InvalidEval("no records".into()));
    }
    if gallery.is_empty() {
        return Err(Error::InvalidEval("empty gallery".into()));
    }
    let ids: BTreeSet<&str> = gallery.iter().map(|g| g.id.as_str()).collect();
    if matches!(target, Target::OtherId) && ids.len() < 2 {
        return Err(Error::InvalidEval(format!(
            "identity swapping needs at least 2 gallery identities, got {}",
            ids.len()
        )));
    }

    let outcomes: Vec<Outcome> = records
        .par_iter()
        .map(|rec| -> Result<Outcome> {
            rec.validate()?;
            if !ids.contains(rec.source_id.as_str()) {
                return Ok(Outcome::Skipped);
            }
            let emb = &rec.anonymized_embedding;
            if norm(emb) < ZERO_NORM && cfg.metric == Metric::Cosine {
                return Ok(Outcome::Evaluated {
                    matched: false,
                    degenerate: true,
                });
            }
            let mut matched = false;
            for g in gallery {
                let eligible = match target {
                    Target::SameId => g.id == rec.source_id,
                    Target::OtherId => g.id != rec.source_id,
                };
                if eligible && verify(emb, &g.embedding, cfg)? {
                    matched = true;
                    break;
                }
            }
            Ok(Outcome::Evaluated {
                matched,
                degenerate: norm(emb) < ZERO_NORM,
            })
        })
        .collect::<Result<_>>()?;

    let mut report = RateReport {
        config: *cfg,
        rate: 0.0,
        matched: 0,
        evaluated: 0,
        degenerate: 0,
        skipped: Vec::new(),
    };
    for (rec, outcome) in records.iter().zip(outcomes) {
        match outcome {
            Outcome::Skipped => {
                warn!("record {:?} has no gallery entry; skipped", rec.source_id);
                report.skipped.push(rec.source_id.clone());
            }
            Outcome::Evaluated { matched, degenerate } => {
                report.evaluated += 1;
                report.matched += matched as usize;
                report.degenerate += degenerate as usize;
            }
        }
    }
    if report.evaluated == 0 {
        return Err(Error::InvalidEval("every record was skipped".into()));
    }
    report.rate = 100.0 * report.matched as f64 / report.evaluated as f64;
    Ok(report)
}

/// Percentage of records still verifiable as their source identity.
pub fn reid_rate(records: &[EvalRecord], gallery: &[GalleryItem], cfg: &VerificationConfig) -> Result<RateReport> {
    rate(records, gallery, cfg, Target::SameId)
}

/// Percentage of records verifiable as some other identity.
pub fn ids_rate(records: &[EvalRecord], gallery: &[GalleryItem], cfg: &VerificationConfig) -> Result<RateReport> {
    rate(records, gallery, cfg, Target::OtherId)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributeReport {
    /// Percentage of agreeing records per attribute.
    pub agreement: BTreeMap<String, f64>,
    pub counted: BTreeMap<String, usize>,
    /// Records lacking the attribute on either side.
    pub excluded: BTreeMap<String, usize>,
}

pub fn attribute_agreement(records: &[EvalRecord], names: &[String]) -> AttributeReport {
    let mut report = AttributeReport::default();
    for name in names {
        let (mut agree, mut counted, mut excluded) = (0usize, 0usize, 0usize);
        for rec in records {
            match (rec.attributes_original.get(name), rec.attributes_anonymized.get(name)) {
                (Some(a), Some(b)) => {
                    counted += 1;
                    agree += (a == b) as usize;
                }
                _ => excluded += 1,
            }
        }
        if excluded > 0 {
            warn!("attribute {name:?} missing on {excluded} records");
            report.excluded.insert(name.clone(), excluded);
        }
        report.counted.insert(name.clone(), counted);
        if counted > 0 {
            report
                .agreement
                .insert(name.clone(), 100.0 * agree as f64 / counted as f64);
        }
    }
    report
}

/// Attribute names present on any record, sorted.
pub fn attribute_names(records: &[EvalRecord]) -> Vec<String> {
    records
        .iter()
        .flat_map(|r| r.attributes_original.keys().chain(r.attributes_anonymized.keys()))
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}
