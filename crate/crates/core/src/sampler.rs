//! Instance-level probabilistic delegate sampling.
//!
//! A candidate set is the exact k-nearest neighbours of a query in a
//! gallery. Each candidate gets a range-normalized utility and is drawn with
//! exponential-mechanism probability
//!
//! ```text
//! P(i) = exp(eps * u_i / (2 du)) / sum_j exp(eps * u_j / (2 du))
//! ```
//!
//! Both utilities lie in `[0, 1]`, so `du = 1` is the default sensitivity.
//! Each draw spends `eps` once; composition across draws is left to callers.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{geometry_distance, pose_bucket, LandmarkSet, PoseAngles, PoseBucket};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryItem {
    pub id: String,
    pub embedding: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<LandmarkSet>,
    /// `[yaw, pitch, roll]` in degrees.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl GalleryItem {
    pub fn new(id: impl Into<String>, embedding: Vec<f32>) -> Self {
        Self {
            id: id.into(),
            embedding,
            landmarks: None,
            pose: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(format!("item {}: non-finite embedding", self.id)));
        }
        Ok(())
    }

    /// Pose bucket from the `pose` field, falling back to a landmark estimate.
    pub fn pose_bucket(&self) -> Result<Option<PoseBucket>> {
        if let Some([y, p, r]) = self.pose {
            return Ok(Some(PoseAngles::new(y, p, r).bucket()));
        }
        self.landmarks.as_ref().map(pose_bucket).transpose()
    }
}

/// Reads one JSON value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let reader = BufReader::new(fs::File::open(path.as_ref())?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| Error::JsonLine { line: n + 1, source })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path.as_ref())?);
    for item in items {
        serde_json::to_writer(&mut f, item)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_gallery(path: impl AsRef<Path>) -> Result<Vec<GalleryItem>> {
    let items: Vec<GalleryItem> = read_jsonl(path)?;
    items.iter().try_for_each(GalleryItem::validate)?;
    Ok(items)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub epsilon: f64,
    pub sensitivity: f64,
    pub seed: u64,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            sensitivity: 1.0,
            seed: 0,
        }
    }
}

impl DpConfig {
    pub fn new(epsilon: f64, seed: u64) -> Self {
        Self {
            epsilon,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidPrivacy(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if !(self.sensitivity > 0.0 && self.sensitivity.is_finite()) {
            return Err(Error::InvalidPrivacy(format!(
                "sensitivity must be > 0, got {}",
                self.sensitivity
            )));
        }
        Ok(())
    }
}

/// Utility values plus whether the all-tied convention was applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utilities {
    pub values: Vec<f64>,
    pub all_tied: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UtilityKind {
    /// Nearest candidate scores 1.
    Appearance,
    /// Farthest candidate scores 1.
    Geometry,
    /// Every candidate scores the same; sampling becomes uniform.
    Uniform,
}

impl std::str::FromStr for UtilityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "appearance" => Ok(Self::Appearance),
            "geometry" => Ok(Self::Geometry),
            "uniform" => Ok(Self::Uniform),
            other => Err(Error::InvalidConfig(format!("unknown utility {other:?}"))),
        }
    }
}

impl UtilityKind {
    pub fn compute(self, distances: &[f64]) -> Result<Utilities> {
        match self {
            UtilityKind::Appearance => utility_appearance(distances),
            UtilityKind::Geometry => utility_geometry(distances),
            UtilityKind::Uniform => {
                check_distances(distances)?;
                Ok(Utilities {
                    values: vec![0.5; distances.len()],
                    all_tied: false,
                })
            }
        }
    }
}

fn check_distances(d: &[f64]) -> Result<(f64, f64)> {
    if d.len() < 2 {
        return Err(Error::TooFewDistances(d.len()));
    }
    if d.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidConfig("distances must be finite and non-negative".into()));
    }
    let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok((min, max))
}

fn range_normalized(d: &[f64], score: impl Fn(f64, f64, f64) -> f64) -> Result<Utilities> {
    let (min, max) = check_distances(d)?;
    if max == min {
        return Ok(Utilities {
            values: vec![0.5; d.len()],
            all_tied: true,
        });
    }
    Ok(Utilities {
        values: d.iter().map(|&di| score(di, min, max)).collect(),
        all_tied: false,
    })
}

/// `u_a = (max d - d_i) / (max d - min d)`. All-equal distances give 0.5 each.
pub fn utility_appearance(distances: &[f64]) -> Result<Utilities> {
    range_normalized(distances, |d, min, max| (max - d) / (max - min))
}

/// `u_g = (d_i - min d) / (max d - min d)`. All-equal distances give 0.5 each.
pub fn utility_geometry(distances: &[f64]) -> Result<Utilities> {
    range_normalized(distances, |d, min, max| (d - min) / (max - min))
}

/// Exponential-mechanism probabilities, max-shifted before exponentiation.
pub fn delegate_probabilities(utilities: &[f64], cfg: &DpConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if utilities.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if utilities.iter().any(|u| !u.is_finite()) {
        return Err(Error::InvalidConfig("utilities must be finite".into()));
    }
    let factor = cfg.epsilon / (2.0 * cfg.sensitivity);
    let max = utilities.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = utilities.iter().map(|&u| (factor * (u - max)).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_index(probabilities: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probabilities.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probabilities.len() - 1
}

#[derive(Debug, Clone, PartialEq)]
pub enum CandidateQuery<'a> {
    /// `l2` distance between embeddings.
    Embedding(&'a [f32]),
    /// `l2` distance after Procrustes alignment onto the query structure.
    Geometry(&'a LandmarkSet),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidateFilter {
    /// Gallery items with this identity are not eligible.
    pub exclude_id: Option<String>,
    /// Only items in this pose bucket are eligible.
    pub pose_bucket: Option<PoseBucket>,
}

/// The `k` nearest eligible gallery items, ascending by distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    /// Positions in the gallery.
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn l2(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// Brute-force k-NN. Ties keep gallery order. Returns every eligible item
/// when fewer than `k` exist, but never fewer than two.
pub fn build_candidate_set(
    query: &CandidateQuery<'_>,
    gallery: &[GalleryItem],
    k: usize,
    filter: &CandidateFilter,
) -> Result<CandidateSet> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("k must be at least 2, got {k}")));
    }
    let mut scored: Vec<(usize, f64)> = Vec::new();
    for (i, item) in gallery.iter().enumerate() {
        if filter.exclude_id.as_deref() == Some(item.id.as_str()) {
            continue;
        }
        if let Some(bucket) = filter.pose_bucket {
            if item.pose_bucket()? != Some(bucket) {
                continue;
            }
        }
        let d = match query {
            CandidateQuery::Embedding(q) => l2(q, &item.embedding)?,
            CandidateQuery::Geometry(s) => {
                let other = item
                    .landmarks
                    .as_ref()
                    .ok_or_else(|| Error::MissingLandmarks { id: item.id.clone() })?;
                geometry_distance(s, other)?
            }
        };
        scored.push((i, d));
    }
    if scored.len() < 2 {
        return Err(Error::InsufficientCandidates { eligible: scored.len() });
    }
    scored.sort_by(|a, b| a.1.total_cmp(&b.1));
    scored.truncate(k);
    Ok(CandidateSet {
        indices: scored.iter().map(|s| s.0).collect(),
        distances: scored.iter().map(|s| s.1).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledDelegate {
    /// Position within the candidate set.
    pub position: usize,
    pub gallery_index: usize,
    pub id: String,
    pub probability: f64,
}

/// Draws one candidate using an RNG seeded from `cfg.seed`.
pub fn sample_delegate(
    candidates: &CandidateSet,
    gallery: &[GalleryItem],
    utilities: &[f64],
    cfg: &DpConfig,
) -> Result<SampledDelegate> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sample_delegate_with(candidates, gallery, utilities, cfg, &mut rng)
}

pub fn sample_delegate_with(
    candidates: &CandidateSet,
    gallery: &[GalleryItem],
    utilities: &[f64],
    cfg: &DpConfig,
    rng: &mut impl Rng,
) -> Result<SampledDelegate> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if utilities.len() != candidates.len() {
        return Err(Error::LengthMismatch {
            left: utilities.len(),
            right: candidates.len(),
        });
    }
    let probabilities = delegate_probabilities(utilities, cfg)?;
    let position = sample_index(&probabilities, rng);
    let gallery_index = candidates.indices[position];
    Ok(SampledDelegate {
        position,
        gallery_index,
        id: gallery[gallery_index].id.clone(),
        probability: probabilities[position],
    })
}

/// Everything needed to replay or inspect one delegate draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingAudit {
    pub candidate_ids: Vec<String>,
    pub gallery_indices: Vec<usize>,
    pub distances: Vec<f64>,
    pub utilities: Vec<f64>,
    pub all_tied: bool,
    pub probabilities: Vec<f64>,
    pub chosen: usize,
    pub epsilon: f64,
    pub sensitivity: f64,
}

impl SamplingAudit {
    pub fn new(
        gallery: &[GalleryItem],
        candidates: &CandidateSet,
        utilities: Utilities,
        probabilities: Vec<f64>,
        chosen: usize,
        cfg: &DpConfig,
    ) -> Self {
        Self {
            candidate_ids: candidates.indices.iter().map(|&i| gallery[i].id.clone()).collect(),
            gallery_indices: candidates.indices.clone(),
            distances: candidates.distances.clone(),
            utilities: utilities.values,
            all_tied: utilities.all_tied,
            probabilities,
            chosen,
            epsilon: cfg.epsilon,
            sensitivity: cfg.sensitivity,
        }
    }

    pub fn chosen_gallery_index(&self) -> usize {
        self.gallery_indices[self.chosen]
    }

    pub fn chosen_id(&self) -> &str {
        &self.candidate_ids[self.chosen]
    }
}

/// Candidate search, utility, and draw for an embedding query.
pub fn sample_appearance(
    query: &[f32],
    gallery: &[GalleryItem],
    k: usize,
    filter: &CandidateFilter,
    utility: UtilityKind,
    cfg: &DpConfig,
    rng: &mut impl Rng,
) -> Result<SamplingAudit> {
    let candidates = build_candidate_set(&CandidateQuery::Embedding(query), gallery, k, filter)?;
    let utilities = utility.compute(&candidates.distances)?;
    let probabilities = delegate_probabilities(&utilities.values, cfg)?;
    let chosen = sample_index(&probabilities, rng);
    Ok(SamplingAudit::new(
        gallery,
        &candidates,
        utilities,
        probabilities,
        chosen,
        cfg,
    ))
}
