//! End-to-end anonymization of conditioning data: identity feature recast,
//! appearance delegate sampling and geometry recovery, per input item.
//!
//! The output of a run is the triple `(Z_id, Z_a, Z_g)` for every input plus
//! per-item audits; synthesis from the triple is out of scope.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::MiniNet;
use crate::error::{Error, Result};
use crate::eval::{ids_rate, reid_rate, EvalRecord, RateReport, VerificationConfig};
use crate::fixtures::{stream_rng, InputItem};
use crate::geometry::{
    anonymize_geometry_with, geometry_distance, BackgroundRegion, GeometryInput, GeometryOptions, PoseAngles,
    PoseBucket, SimilarityTransform,
};
use crate::ifa::{distract, nulled_classes, DistractionConfig, DistractionMode};
use crate::sampler::{
    read_gallery, read_jsonl, sample_appearance, CandidateFilter, DpConfig, GalleryItem, SamplingAudit, UtilityKind,
};
use crate::tensor::Tensor;

/// Relative tolerance for counting a class as nulled.
pub const NULLED_TOL: f64 = 1e-5;

/// Verification setting used for the run's own ReID/IDS summary.
pub fn report_verification() -> VerificationConfig {
    VerificationConfig::cosine(0.30)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpSettings {
    pub epsilon: f64,
    /// Candidate set size.
    pub k: usize,
    pub sensitivity: f64,
    pub exclude_same_id: bool,
    pub appearance_utility: UtilityKind,
    pub geometry_utility: UtilityKind,
}

impl Default for DpSettings {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            k: 5,
            sensitivity: 1.0,
            exclude_same_id: true,
            appearance_utility: UtilityKind::Appearance,
            geometry_utility: UtilityKind::Geometry,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunPaths {
    /// MiniNet directory.
    pub net: PathBuf,
    pub gallery: PathBuf,
    pub inputs: PathBuf,
    pub output: PathBuf,
}

impl Default for RunPaths {
    fn default() -> Self {
        Self {
            net: "net".into(),
            gallery: "gallery.jsonl".into(),
            inputs: "inputs.jsonl".into(),
            output: "out".into(),
        }
    }
}

impl RunPaths {
    /// Resolves relative paths against `base`.
    pub fn resolved(&self, base: &Path) -> Self {
        let r = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        Self {
            net: r(&self.net),
            gallery: r(&self.gallery),
            inputs: r(&self.inputs),
            output: r(&self.output),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stages {
    pub ifa: bool,
    pub vaa: bool,
    pub gsa: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Self {
            ifa: true,
            vaa: true,
            gsa: true,
        }
    }
}

impl Stages {
    pub fn none() -> Self {
        Self {
            ifa: false,
            vaa: false,
            gsa: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub distraction: DistractionConfig,
    pub dp: DpSettings,
    pub paths: RunPaths,
    pub stages: Stages,
}

impl RunConfig {
    /// Reads a JSON config; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.paths = cfg.paths.resolved(base);
        Ok(cfg)
    }

    pub fn dp_config(&self) -> DpConfig {
        DpConfig {
            epsilon: self.dp.epsilon,
            sensitivity: self.dp.sensitivity,
            seed: self.seed,
        }
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if self.stages.ifa {
            self.distraction.validate(n_classes)?;
        }
        if self.stages.vaa || self.stages.gsa {
            self.dp_config().validate()?;
            if self.dp.k < 2 {
                return Err(Error::InvalidConfig(format!(
                    "dp.k must be at least 2, got {}",
                    self.dp.k
                )));
            }
        }
        Ok(())
    }
}

/// Everything a run reads, loaded once.
#[derive(Debug, Clone)]
pub struct RunData {
    pub net: MiniNet,
    pub gallery: Vec<GalleryItem>,
    pub inputs: Vec<InputItem>,
    pub images: Vec<Tensor>,
    pub references: Vec<Vec<Tensor>>,
}

impl RunData {
    pub fn load(paths: &RunPaths) -> Result<Self> {
        for p in [&paths.net, &paths.gallery, &paths.inputs] {
            if !p.exists() {
                return Err(Error::MissingInput(p.display().to_string()));
            }
        }
        let net = MiniNet::load(&paths.net)?;
        let gallery = read_gallery(&paths.gallery)?;
        let inputs: Vec<InputItem> = read_jsonl(&paths.inputs)?;
        if inputs.is_empty() {
            return Err(Error::MissingInput(format!("{} has no items", paths.inputs.display())));
        }
        let base = paths.inputs.parent().unwrap_or(Path::new(""));
        let images = inputs
            .iter()
            .map(|i| Tensor::read_adt(base.join(&i.image)))
            .collect::<Result<Vec<_>>>()?;
        let references = inputs
            .iter()
            .map(|i| i.references.iter().map(|r| Tensor::read_adt(base.join(r))).collect())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            net,
            gallery,
            inputs,
            images,
            references,
        })
    }

    /// Recognition gallery: the pooled feature of every reference image.
    pub fn reference_gallery(&self) -> Result<Vec<GalleryItem>> {
        let mut out = Vec::new();
        for (item, refs) in self.inputs.iter().zip(&self.references) {
            for image in refs {
                out.push(GalleryItem::new(item.id.clone(), self.feature(image)?));
            }
        }
        Ok(out)
    }

    pub fn feature(&self, image: &Tensor) -> Result<Vec<f32>> {
        let a = self.net.activations(image)?;
        Ok(self.net.forward_from_activation(&a)?.1)
    }
}

/// Appearance reference carried in place of the delegate face image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppearanceRef {
    pub delegate_id: String,
    /// Gallery row of the delegate; absent when the original is passed through.
    pub gallery_index: Option<usize>,
    pub embedding: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    pub index: usize,
    pub id: String,
    pub z_id: Option<Vec<f32>>,
    pub z_a: Option<AppearanceRef>,
    pub z_g: Option<GeometryInput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IfaAudit {
    pub k: usize,
    pub mode: DistractionMode,
    pub classes: Vec<usize>,
    pub residuals: Vec<f64>,
    pub normalized_residuals: Vec<f64>,
    pub skipped: Vec<usize>,
    pub nulled_classes: Vec<usize>,
    pub top1_logit_before: f32,
    pub top1_logit_after: f32,
    pub feature_displacement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GsaAudit {
    pub delegate_id: String,
    pub pose_bucket: PoseBucket,
    pub transform: SimilarityTransform,
    pub sampling: SamplingAudit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemAudit {
    pub index: usize,
    pub id: String,
    pub ifa: Option<IfaAudit>,
    pub vaa: Option<SamplingAudit>,
    pub gsa: Option<GsaAudit>,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemOutcome {
    pub triple: Triple,
    pub audit: ItemAudit,
    pub original_feature: Option<Vec<f32>>,
}

/// Per-item seed; appearance and geometry draws use separate streams.
pub fn item_seed(seed: u64, index: usize) -> u64 {
    seed ^ index as u64
}

const VAA_STREAM: u64 = 0;
const GSA_STREAM: u64 = 1;

fn ifa_stage(
    data: &RunData,
    image: &Tensor,
    cfg: &DistractionConfig,
    original: &mut Option<Vec<f32>>,
) -> Result<(Vec<f32>, IfaAudit)> {
    let (a, pred) = data.net.forward(image)?;
    let (_, feature) = data.net.forward_from_activation(&a)?;
    *original = Some(feature.clone());
    let result = distract(&data.net, &a, &pred, cfg)?;
    let top1 = pred.top_k[0];
    let displacement = feature
        .iter()
        .zip(&result.recast_feature)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    let audit = IfaAudit {
        k: cfg.k,
        mode: cfg.mode,
        classes: result.classes.iter().map(|c| c.class_index).collect(),
        residuals: result.residuals(),
        normalized_residuals: result.classes.iter().map(|c| c.normalized_residual()).collect(),
        skipped: result.skipped.clone(),
        nulled_classes: nulled_classes(&data.net, &a, &result.a_hat, NULLED_TOL)?,
        top1_logit_before: result.logits_before[top1],
        top1_logit_after: result.logits_after[top1],
        feature_displacement: displacement,
    };
    Ok((result.recast_feature, audit))
}

/// Runs the enabled stages on input `index`. Stage failures are recorded in
/// the audit and leave the corresponding triple slot empty.
pub fn process_item(data: &RunData, cfg: &RunConfig, index: usize) -> ItemOutcome {
    let input = &data.inputs[index];
    let image = &data.images[index];
    let seed = item_seed(cfg.seed, index);
    let dp = DpConfig {
        seed,
        ..cfg.dp_config()
    };
    let exclude = cfg.dp.exclude_same_id.then(|| input.id.clone());
    let mut errors = Vec::new();
    let mut original_feature = None;

    let (z_id, ifa) = if cfg.stages.ifa {
        match ifa_stage(data, image, &cfg.distraction, &mut original_feature) {
            Ok((f, audit)) => (Some(f), Some(audit)),
            Err(e) => {
                errors.push(format!("ifa: {e}"));
                (None, None)
            }
        }
    } else {
        match data.feature(image) {
            Ok(f) => {
                original_feature = Some(f.clone());
                (Some(f), None)
            }
            Err(e) => {
                errors.push(format!("feature: {e}"));
                (None, None)
            }
        }
    };

    let (z_a, vaa) = if cfg.stages.vaa {
        let filter = CandidateFilter {
            exclude_id: exclude.clone(),
            pose_bucket: None,
        };
        let mut rng = stream_rng(seed, VAA_STREAM);
        match sample_appearance(
            &input.embedding,
            &data.gallery,
            cfg.dp.k,
            &filter,
            cfg.dp.appearance_utility,
            &dp,
            &mut rng,
        ) {
            Ok(audit) => {
                let g = audit.chosen_gallery_index();
                let z = AppearanceRef {
                    delegate_id: audit.chosen_id().to_string(),
                    gallery_index: Some(g),
                    embedding: data.gallery[g].embedding.clone(),
                };
                (Some(z), Some(audit))
            }
            Err(e) => {
                errors.push(format!("vaa: {e}"));
                (None, None)
            }
        }
    } else {
        let z = AppearanceRef {
            delegate_id: input.id.clone(),
            gallery_index: None,
            embedding: input.embedding.clone(),
        };
        (Some(z), None)
    };

    let background = BackgroundRegion::outside_face(&input.landmarks);
    let (z_g, gsa) = if cfg.stages.gsa {
        let opts = GeometryOptions {
            query_pose: input.pose.map(|[y, p, r]| PoseAngles::new(y, p, r)),
            exclude_id: exclude,
            utility: Some(cfg.dp.geometry_utility),
        };
        let mut rng = stream_rng(seed, GSA_STREAM);
        match anonymize_geometry_with(
            &input.landmarks,
            &data.gallery,
            cfg.dp.k,
            &dp,
            background,
            &opts,
            &mut rng,
        ) {
            Ok(g) => {
                let audit = GsaAudit {
                    delegate_id: g.delegate_id,
                    pose_bucket: g.pose_bucket,
                    transform: g.transform,
                    sampling: g.audit,
                };
                (Some(g.input), Some(audit))
            }
            Err(e) => {
                errors.push(format!("gsa: {e}"));
                (None, None)
            }
        }
    } else {
        match GeometryInput::new(input.landmarks.clone(), background) {
            Ok(g) => (Some(g), None),
            Err(e) => {
                errors.push(format!("geometry: {e}"));
                (None, None)
            }
        }
    };

    for e in &errors {
        warn!("item {index} ({}): {e}", input.id);
    }
    ItemOutcome {
        triple: Triple {
            index,
            id: input.id.clone(),
            z_id,
            z_a,
            z_g,
        },
        audit: ItemAudit {
            index,
            id: input.id.clone(),
            ifa,
            vaa,
            gsa,
            errors,
        },
        original_feature,
    }
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Processes every input in parallel (`jobs == 0` uses all cores); results
/// keep input order.
pub fn run_items(data: &RunData, cfg: &RunConfig, jobs: usize) -> Result<Vec<ItemOutcome>> {
    cfg.validate(data.net.n_classes())?;
    with_pool(jobs, || {
        (0..data.inputs.len())
            .into_par_iter()
            .map(|i| process_item(data, cfg, i))
            .collect()
    })
}

/// Identity-feature records for the verification metrics.
pub fn eval_records(outcomes: &[ItemOutcome]) -> Vec<EvalRecord> {
    outcomes
        .iter()
        .filter_map(|o| {
            Some(EvalRecord {
                source_id: o.triple.id.clone(),
                original_embedding: o.original_feature.clone()?,
                anonymized_embedding: o.triple.z_id.clone()?,
                attributes_original: Default::default(),
                attributes_anonymized: Default::default(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    /// Budget spent on the appearance draw, if that stage ran.
    pub vaa_epsilon: Option<f64>,
    /// Budget spent on the geometry draw, if that stage ran.
    pub gsa_epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub stages: Stages,
    pub items: usize,
    pub failed_items: Vec<usize>,
    pub privacy: PrivacyBudget,
    /// `Z_id` against the reference features.
    pub reid: Option<RateReport>,
    pub ids: Option<RateReport>,
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidConfig(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn jsonl_bytes<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn pretty_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

pub const TRIPLES_FILE: &str = "triples.jsonl";
pub const AUDIT_FILE: &str = "audit.json";
pub const RUN_RECORDS_FILE: &str = "records.jsonl";
pub const REFERENCES_FILE: &str = "references.jsonl";
pub const REPORT_FILE: &str = "report.json";

fn rates(data: &RunData, records: &[EvalRecord]) -> Result<(Option<RateReport>, Option<RateReport>)> {
    let references = data.reference_gallery()?;
    if records.is_empty() || references.is_empty() {
        return Ok((None, None));
    }
    let cfg = report_verification();
    let ids = ids_rate(records, &references, &cfg).ok();
    Ok((Some(reid_rate(records, &references, &cfg)?), ids))
}

/// Runs every item and writes the triples, audits, identity records,
/// reference features and a summary report under `cfg.paths.output`.
pub fn run_pipeline(cfg: &RunConfig, jobs: usize) -> Result<RunReport> {
    let data = RunData::load(&cfg.paths)?;
    let outcomes = run_items(&data, cfg, jobs)?;
    let out = &cfg.paths.output;
    fs::create_dir_all(out)?;

    let triples: Vec<&Triple> = outcomes.iter().map(|o| &o.triple).collect();
    let audits: Vec<&ItemAudit> = outcomes.iter().map(|o| &o.audit).collect();
    let records = eval_records(&outcomes);
    let references = data.reference_gallery()?;
    let (reid, ids) = rates(&data, &records)?;
    let report = RunReport {
        seed: cfg.seed,
        stages: cfg.stages,
        items: outcomes.len(),
        failed_items: outcomes
            .iter()
            .filter(|o| !o.audit.errors.is_empty())
            .map(|o| o.triple.index)
            .collect(),
        privacy: PrivacyBudget {
            vaa_epsilon: cfg.stages.vaa.then_some(cfg.dp.epsilon),
            gsa_epsilon: cfg.stages.gsa.then_some(cfg.dp.epsilon),
        },
        reid,
        ids,
    };

    write_atomic(&out.join(TRIPLES_FILE), &jsonl_bytes(&triples)?)?;
    write_atomic(&out.join(AUDIT_FILE), &pretty_bytes(&audits)?)?;
    write_atomic(&out.join(RUN_RECORDS_FILE), &jsonl_bytes(&records)?)?;
    write_atomic(&out.join(REFERENCES_FILE), &jsonl_bytes(&references)?)?;
    write_atomic(&out.join(REPORT_FILE), &pretty_bytes(&report)?)?;
    info!(
        "processed {} items ({} with errors) into {}",
        report.items,
        report.failed_items.len(),
        out.display()
    );
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub mode: DistractionMode,
    /// Mean over items of the mean normalized residual of the top-K classes.
    pub mean_residual: f64,
    pub max_residual: f64,
    /// Mean number of classes whose map is nulled.
    pub nulled_classes: f64,
    /// Mean drop of the top-1 logit.
    pub logit_drop: f64,
    pub feature_displacement: f64,
    pub reid_pct: f64,
    pub ids_pct: f64,
    /// Items whose recast feature vanished.
    pub degenerate: usize,
}

/// One row per `(K, mode)`: distraction statistics and the ReID/IDS of the
/// recast features against the reference features.
pub fn sweep_k(
    data: &RunData,
    cfg: &RunConfig,
    ks: &[usize],
    modes: &[DistractionMode],
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    let n_classes = data.net.n_classes();
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n_classes) {
        return Err(Error::InvalidDistraction(format!("k = {k} outside [1, {n_classes}]")));
    }
    let references = data.reference_gallery()?;
    let verification = report_verification();
    let mut rows = Vec::new();
    for &mode in modes {
        for &k in ks {
            let dcfg = DistractionConfig {
                k,
                weights: Vec::new(),
                mode,
                ..cfg.distraction.clone()
            };
            dcfg.validate(n_classes)?;
            let per_item: Vec<(Vec<f32>, IfaAudit, Vec<f32>)> = with_pool(jobs, || {
                (0..data.inputs.len())
                    .into_par_iter()
                    .map(|i| {
                        let mut original = None;
                        let (recast, audit) = ifa_stage(data, &data.images[i], &dcfg, &mut original)?;
                        Ok((recast, audit, original.unwrap_or_default()))
                    })
                    .collect::<Result<Vec<_>>>()
            })??;

            let n = per_item.len() as f64;
            let mean = |f: &dyn Fn(&IfaAudit) -> f64| per_item.iter().map(|(_, a, _)| f(a)).sum::<f64>() / n;
            let class_mean =
                |a: &IfaAudit| a.normalized_residuals.iter().sum::<f64>() / a.normalized_residuals.len() as f64;
            let records: Vec<EvalRecord> = data
                .inputs
                .iter()
                .zip(&per_item)
                .map(|(input, (recast, _, original))| EvalRecord {
                    source_id: input.id.clone(),
                    original_embedding: original.clone(),
                    anonymized_embedding: recast.clone(),
                    attributes_original: Default::default(),
                    attributes_anonymized: Default::default(),
                })
                .collect();
            let reid = reid_rate(&records, &references, &verification)?;
            let ids = ids_rate(&records, &references, &verification)?;
            rows.push(SweepRow {
                k,
                mode,
                mean_residual: mean(&class_mean),
                max_residual: per_item
                    .iter()
                    .flat_map(|(_, a, _)| a.normalized_residuals.iter().copied())
                    .fold(0.0, f64::max),
                nulled_classes: mean(&|a| a.nulled_classes.len() as f64),
                logit_drop: mean(&|a| (a.top1_logit_before - a.top1_logit_after) as f64),
                feature_displacement: mean(&|a| a.feature_displacement),
                reid_pct: reid.rate,
                ids_pct: ids.rate,
                degenerate: reid.degenerate,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(
        "k,mode,mean_residual,max_residual,nulled_classes,logit_drop,feature_displacement,reid_pct,ids_pct,degenerate\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:e},{:e},{},{},{},{},{},{}",
            r.k,
            r.mode,
            r.mean_residual,
            r.max_residual,
            r.nulled_classes,
            r.logit_drop,
            r.feature_displacement,
            r.reid_pct,
            r.ids_pct,
            r.degenerate
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub stages: Stages,
    pub appearance_utility: UtilityKind,
    pub geometry_utility: UtilityKind,
    pub reid_pct: f64,
    pub ids_pct: f64,
    /// Mean embedding distance from each input to its appearance delegate.
    pub appearance_distance: f64,
    /// Mean aligned landmark distance from each input to its output structure.
    pub geometry_distance: f64,
    pub failed_items: usize,
}

/// The stage removals and utility swaps compared by [`ablate`].
pub fn ablation_variants(cfg: &RunConfig) -> Vec<(String, RunConfig)> {
    let variant = |name: &str, f: &dyn Fn(&mut RunConfig)| {
        let mut c = cfg.clone();
        f(&mut c);
        (name.to_string(), c)
    };
    vec![
        variant("full", &|_| {}),
        variant("without-ifa", &|c| c.stages.ifa = false),
        variant("without-vaa", &|c| c.stages.vaa = false),
        variant("without-gsa", &|c| c.stages.gsa = false),
        variant("uniform-appearance-utility", &|c| {
            c.dp.appearance_utility = UtilityKind::Uniform
        }),
        variant("uniform-geometry-utility", &|c| {
            c.dp.geometry_utility = UtilityKind::Uniform
        }),
        variant("none", &|c| c.stages = Stages::none()),
    ]
}

pub fn ablate(data: &RunData, cfg: &RunConfig, jobs: usize) -> Result<Vec<AblationRow>> {
    let references = data.reference_gallery()?;
    let verification = report_verification();
    let mut rows = Vec::new();
    for (name, vcfg) in ablation_variants(cfg) {
        let outcomes = run_items(data, &vcfg, jobs)?;
        let records = eval_records(&outcomes);
        let reid = reid_rate(&records, &references, &verification)?;
        let ids = ids_rate(&records, &references, &verification)?;
        let mut appearance = Vec::new();
        let mut geometry = Vec::new();
        for (o, input) in outcomes.iter().zip(&data.inputs) {
            if let Some(z) = &o.triple.z_a {
                appearance.push(crate::eval::l2_distance(&input.embedding, &z.embedding)?);
            }
            if let Some(z) = &o.triple.z_g {
                geometry.push(geometry_distance(&input.landmarks, &z.structure)?);
            }
        }
        let mean = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        rows.push(AblationRow {
            variant: name,
            stages: vcfg.stages,
            appearance_utility: vcfg.dp.appearance_utility,
            geometry_utility: vcfg.dp.geometry_utility,
            reid_pct: reid.rate,
            ids_pct: ids.rate,
            appearance_distance: mean(&appearance),
            geometry_distance: mean(&geometry),
            failed_items: outcomes.iter().filter(|o| !o.audit.errors.is_empty()).count(),
        });
    }
    Ok(rows)
}

fn utility_name(u: UtilityKind) -> &'static str {
    match u {
        UtilityKind::Appearance => "appearance",
        UtilityKind::Geometry => "geometry",
        UtilityKind::Uniform => "uniform",
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(
        "variant,ifa,vaa,gsa,appearance_utility,geometry_utility,reid_pct,ids_pct,appearance_distance,geometry_distance,failed_items\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.variant,
            r.stages.ifa,
            r.stages.vaa,
            r.stages.gsa,
            utility_name(r.appearance_utility),
            utility_name(r.geometry_utility),
            r.reid_pct,
            r.ids_pct,
            r.appearance_distance,
            r.geometry_distance,
            r.failed_items
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::MiniNetConfig;
    use crate::fixtures::{make_fixtures, FixtureCounts};

    fn fixture_config(dir: &Path) -> RunConfig {
        make_fixtures(dir, 11, &FixtureCounts::default(), &MiniNetConfig::default()).unwrap();
        RunConfig {
            seed: 11,
            paths: RunPaths::default().resolved(dir),
            ..RunConfig::default()
        }
    }

    #[test]
    fn disabled_stages_pass_inputs_through() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = fixture_config(dir.path());
        cfg.stages = Stages::none();
        let data = RunData::load(&cfg.paths).unwrap();
        for o in run_items(&data, &cfg, 2).unwrap() {
            let input = &data.inputs[o.triple.index];
            assert!(o.audit.errors.is_empty());
            assert_eq!(o.triple.z_id.as_ref(), o.original_feature.as_ref());
            assert_eq!(o.triple.z_a.as_ref().unwrap().embedding, input.embedding);
            assert_eq!(o.triple.z_g.as_ref().unwrap().structure, input.landmarks);
        }
    }

    #[test]
    fn gsa_off_keeps_original_structure() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = fixture_config(dir.path());
        cfg.stages.gsa = false;
        let data = RunData::load(&cfg.paths).unwrap();
        for o in run_items(&data, &cfg, 0).unwrap() {
            assert!(o.audit.errors.is_empty(), "{:?}", o.audit.errors);
            assert_eq!(o.triple.z_g.unwrap().structure, data.inputs[o.triple.index].landmarks);
            assert_ne!(o.triple.z_a.unwrap().delegate_id, o.triple.id);
        }
    }

    #[test]
    fn full_run_replaces_every_slot() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = fixture_config(dir.path());
        let data = RunData::load(&cfg.paths).unwrap();
        for o in run_items(&data, &cfg, 0).unwrap() {
            assert!(o.audit.errors.is_empty(), "{:?}", o.audit.errors);
            let input = &data.inputs[o.triple.index];
            assert_ne!(o.triple.z_g.unwrap().structure, input.landmarks);
            assert_ne!(o.triple.z_id, o.original_feature);
            let gsa = o.audit.gsa.unwrap();
            assert_ne!(gsa.delegate_id, input.id);
        }
    }

    #[test]
    fn job_count_does_not_change_results() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = fixture_config(dir.path());
        let data = RunData::load(&cfg.paths).unwrap();
        assert_eq!(run_items(&data, &cfg, 1).unwrap(), run_items(&data, &cfg, 4).unwrap());
    }

    #[test]
    fn sweep_rejects_out_of_range_k() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = fixture_config(dir.path());
        let data = RunData::load(&cfg.paths).unwrap();
        assert!(sweep_k(&data, &cfg, &[0], &[DistractionMode::PaperSum], 0).is_err());
        assert!(sweep_k(&data, &cfg, &[17], &[DistractionMode::PaperSum], 0).is_err());
    }

    #[test]
    fn config_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("c.json"),
            r#"{"seed": 3, "paths": {"output": "/abs/out"}}"#,
        )
        .unwrap();
        let cfg = RunConfig::load(dir.path().join("c.json")).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.paths.gallery, dir.path().join("gallery.jsonl"));
        assert_eq!(cfg.paths.output, PathBuf::from("/abs/out"));
        assert_eq!(cfg.distraction, DistractionConfig::default());
    }
}
