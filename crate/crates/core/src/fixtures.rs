//! Seeded synthetic fixtures: a calibrated MiniNet, per-identity images,
//! clustered embeddings and parameterized 68-point faces.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{MiniNet, MiniNetConfig};
use crate::error::{Error, Result};
use crate::eval::EvalRecord;
use crate::geometry::{canonical_face, project, LandmarkSet, Point, PoseAngles, CONTOUR, EYES, NOSE, OUTER_LIP};
use crate::sampler::{write_jsonl, GalleryItem};
use crate::tensor::Tensor;

/// Image side length for synthetic landmark coordinates.
pub const FRAME: f64 = 128.0;
const FACE_SCALE: f64 = 40.0;
const HEAD_SCALE: f32 = 10.0;
const PATTERN_BLOCKS: usize = 4;
pub const IMAGE_NOISE: f32 = 0.05;
const POSE_JITTER_DEG: f64 = 3.0;
const YAW_BUCKETS: [f64; 3] = [-15.0, 0.0, 15.0];

/// A generator seeded from `seed` on a dedicated stream.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// Stream tags keep the fixture draws independent of one another.
const S_PROTOTYPE: u64 = 1 << 32;
const S_INSTANCE: u64 = 2 << 32;
const S_EMBED: u64 = 3 << 32;
const S_FACE: u64 = 4 << 32;
const S_EVAL: u64 = 5 << 32;

/// Block-structured prototype image for class `c`.
pub fn prototype_image(cfg: &MiniNetConfig, seed: u64, c: usize) -> Tensor {
    let mut rng = stream_rng(seed, S_PROTOTYPE + c as u64);
    let n = cfg.input_size;
    let block = n.div_ceil(PATTERN_BLOCKS);
    let mut data = Vec::with_capacity(cfg.input_channels * n * n);
    for _ in 0..cfg.input_channels {
        let gain: f32 = rng.gen_range(0.2..1.0);
        let pattern: Vec<f32> = (0..PATTERN_BLOCKS * PATTERN_BLOCKS).map(|_| rng.gen()).collect();
        for y in 0..n {
            for x in 0..n {
                data.push(gain * pattern[(y / block) * PATTERN_BLOCKS + x / block]);
            }
        }
    }
    Tensor::new(vec![cfg.input_channels, n, n], data).expect("prototype shape is consistent")
}

/// Prototype `c` plus uniform pixel noise of amplitude [`IMAGE_NOISE`].
pub fn identity_image(cfg: &MiniNetConfig, seed: u64, c: usize, instance: usize) -> Tensor {
    let proto = prototype_image(cfg, seed, c);
    let mut rng = stream_rng(seed, S_INSTANCE + ((c as u64) << 16) + instance as u64);
    let data = proto
        .data()
        .iter()
        .map(|v| v + rng.gen_range(-IMAGE_NOISE..IMAGE_NOISE))
        .collect();
    Tensor::new(proto.shape().to_vec(), data).expect("noise keeps values finite")
}

/// Seeded convolutions with a head whose rows point along each class
/// prototype's pooled feature, so that prototypes classify as themselves.
pub fn fixture_net(cfg: &MiniNetConfig, seed: u64) -> Result<MiniNet> {
    let base = MiniNet::random(cfg, seed);
    let mut rows = Vec::with_capacity(cfg.n_classes * cfg.channels);
    for c in 0..cfg.n_classes {
        let (_, feature) = base.forward_from_activation(&base.activations(&prototype_image(cfg, seed, c))?)?;
        let norm = crate::tensor::norm(&feature) as f32;
        if norm == 0.0 {
            return Err(Error::InvalidConfig(format!("prototype {c} has a zero feature")));
        }
        rows.extend(feature.iter().map(|v| HEAD_SCALE * v / norm));
    }
    base.with_head(
        Tensor::new(vec![cfg.n_classes, cfg.channels], rows)?,
        Tensor::zeros(&[cfg.n_classes]),
    )
}

fn unit(v: Vec<f32>) -> Vec<f32> {
    let n = crate::tensor::norm(&v) as f32;
    v.into_iter().map(|x| x / n).collect()
}

fn gaussian(rng: &mut ChaCha8Rng) -> f32 {
    // Box-Muller; only used for fixture jitter.
    let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
    let u2: f32 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
}

/// Unit vectors clustered around per-identity centres. `spread` is the
/// per-coordinate noise scale relative to `1 / sqrt(dim)`.
pub fn clustered_embeddings(seed: u64, n_ids: usize, per_id: usize, dim: usize, spread: f32) -> Vec<Vec<Vec<f32>>> {
    let mut rng = stream_rng(seed, S_EMBED);
    let scale = spread / (dim as f32).sqrt();
    (0..n_ids)
        .map(|_| {
            let centre = unit((0..dim).map(|_| gaussian(&mut rng)).collect());
            (0..per_id)
                .map(|_| unit(centre.iter().map(|c| c + scale * gaussian(&mut rng)).collect()))
                .collect()
        })
        .collect()
}

/// Shape and expression parameters for a synthetic face.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceParams {
    pub width: f64,
    pub height: f64,
    pub jaw: f64,
    pub eye_spacing: f64,
    pub nose_length: f64,
    pub mouth_width: f64,
    pub lip_thickness: f64,
    pub mouth_open: f64,
}

impl Default for FaceParams {
    fn default() -> Self {
        Self {
            width: 1.0,
            height: 1.0,
            jaw: 1.0,
            eye_spacing: 0.0,
            nose_length: 1.0,
            mouth_width: 1.0,
            lip_thickness: 0.0,
            mouth_open: 0.0,
        }
    }
}

impl FaceParams {
    /// Random identity shape with a closed mouth.
    pub fn random_shape(rng: &mut impl Rng) -> Self {
        Self {
            width: rng.gen_range(0.85..1.15),
            height: rng.gen_range(0.85..1.15),
            jaw: rng.gen_range(0.85..1.1),
            eye_spacing: rng.gen_range(-0.05..0.05),
            nose_length: rng.gen_range(0.8..1.2),
            mouth_width: rng.gen_range(0.8..1.2),
            lip_thickness: rng.gen_range(-0.02..0.06),
            mouth_open: 0.0,
        }
    }

    pub fn with_open(mut self, open: f64) -> Self {
        self.mouth_open = open;
        self
    }

    /// 3D face in the canonical frame.
    pub fn face(&self) -> Vec<[f64; 3]> {
        let mut p = canonical_face();
        for q in &mut p[CONTOUR] {
            q[0] *= self.jaw;
        }
        for q in &mut p[EYES] {
            q[0] += self.eye_spacing * q[0].signum();
        }
        for q in &mut p[NOSE] {
            q[1] = 0.4 + (q[1] - 0.4) * self.nose_length;
        }
        for q in &mut p[OUTER_LIP.start..] {
            q[0] *= self.mouth_width;
        }
        for i in 49..=53 {
            p[i][1] += self.lip_thickness;
        }
        for i in 55..=59 {
            p[i][1] -= self.lip_thickness + self.mouth_open;
        }
        for i in 65..=67 {
            p[i][1] -= self.mouth_open;
        }
        for q in &mut p {
            q[0] *= self.width;
            q[1] *= self.height;
        }
        p
    }

    /// Projected landmarks centred in a [`FRAME`]-sized image.
    pub fn landmarks(&self, pose: &PoseAngles, scale: f64, center: Point) -> Result<LandmarkSet> {
        LandmarkSet::with_bounds(project(&self.face(), pose, scale, center), FRAME, FRAME)
    }
}

/// A pose near one of the fixture yaw buckets.
pub fn jittered_pose(rng: &mut impl Rng, bucket: usize) -> PoseAngles {
    let mut j = || rng.gen_range(-POSE_JITTER_DEG..POSE_JITTER_DEG);
    PoseAngles::new(YAW_BUCKETS[bucket % YAW_BUCKETS.len()] + j(), j(), j())
}

/// Random placement inside the frame.
pub fn random_placement(rng: &mut impl Rng) -> (f64, Point) {
    let scale = FACE_SCALE * rng.gen_range(0.9..1.1);
    let center = [
        FRAME / 2.0 + rng.gen_range(-4.0..4.0),
        FRAME / 2.0 + rng.gen_range(-4.0..4.0),
    ];
    (scale, center)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureCounts {
    pub identities: usize,
    /// Extra images per identity used as recognition references.
    pub references: usize,
    /// Delegate gallery entries per identity.
    pub gallery_per_id: usize,
    pub embedding_dim: usize,
    /// Standalone evaluation set sizes.
    pub eval_records: usize,
    pub eval_identities: usize,
    pub eval_per_id: usize,
}

impl Default for FixtureCounts {
    fn default() -> Self {
        Self {
            identities: 16,
            references: 2,
            gallery_per_id: 4,
            embedding_dim: 32,
            eval_records: 50,
            eval_identities: 20,
            eval_per_id: 5,
        }
    }
}

impl FixtureCounts {
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        let positive = [
            self.identities,
            self.references,
            self.gallery_per_id,
            self.embedding_dim,
            self.eval_records,
            self.eval_identities,
            self.eval_per_id,
        ];
        if positive.contains(&0) {
            return Err(Error::InvalidConfig("fixture counts must be positive".into()));
        }
        if self.identities < 2 || self.eval_identities < 2 {
            return Err(Error::InvalidConfig("fixtures need at least 2 identities".into()));
        }
        if self.identities > n_classes {
            return Err(Error::InvalidConfig(format!(
                "{} identities exceed the network's {} classes",
                self.identities, n_classes
            )));
        }
        Ok(())
    }
}

/// One query item of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputItem {
    pub id: String,
    /// Image path, relative to the inputs file.
    pub image: PathBuf,
    /// Other images of the same identity, relative to the inputs file.
    #[serde(default)]
    pub references: Vec<PathBuf>,
    /// Appearance embedding used for delegate search.
    pub embedding: Vec<f32>,
    pub landmarks: LandmarkSet,
    /// `[yaw, pitch, roll]` in degrees.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<[f64; 3]>,
}

pub fn identity_name(i: usize) -> String {
    format!("id{i:02}")
}

/// File names written by [`make_fixtures`], relative to its directory.
pub const NET_DIR: &str = "net";
pub const IMAGES_DIR: &str = "images";
pub const GALLERY_FILE: &str = "gallery.jsonl";
pub const INPUTS_FILE: &str = "inputs.jsonl";
pub const EVAL_GALLERY_FILE: &str = "eval_gallery.jsonl";
pub const RECORDS_FILE: &str = "records.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSummary {
    pub seed: u64,
    pub counts: FixtureCounts,
    pub files: Vec<PathBuf>,
}

/// Writes every fixture file under `dir`.
pub fn make_fixtures(
    dir: impl AsRef<Path>,
    seed: u64,
    counts: &FixtureCounts,
    net_cfg: &MiniNetConfig,
) -> Result<FixtureSummary> {
    counts.validate(net_cfg.n_classes)?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join(IMAGES_DIR))?;
    let mut files = Vec::new();

    fixture_net(net_cfg, seed)?.save(dir.join(NET_DIR))?;
    files.push(PathBuf::from(NET_DIR));

    let n_ids = counts.identities;
    let embeddings = clustered_embeddings(seed, n_ids, 1 + counts.gallery_per_id, counts.embedding_dim, 0.5);
    let mut face_rng = stream_rng(seed, S_FACE);
    let shapes: Vec<FaceParams> = (0..n_ids).map(|_| FaceParams::random_shape(&mut face_rng)).collect();

    let mut gallery = Vec::new();
    let mut inputs = Vec::new();
    for (c, shape) in shapes.iter().enumerate() {
        let id = identity_name(c);
        let mut images = Vec::new();
        for instance in 0..=counts.references {
            let rel = PathBuf::from(IMAGES_DIR).join(format!("{id}_{instance}.adt"));
            identity_image(net_cfg, seed, c, instance).write_adt(dir.join(&rel))?;
            files.push(rel.clone());
            images.push(rel);
        }

        let face = |rng: &mut ChaCha8Rng, bucket: usize| -> Result<(LandmarkSet, PoseAngles)> {
            let pose = jittered_pose(rng, bucket);
            let open = rng.gen_range(0.0..0.12);
            let (scale, center) = random_placement(rng);
            Ok((shape.with_open(open).landmarks(&pose, scale, center)?, pose))
        };
        let (landmarks, pose) = face(&mut face_rng, c)?;
        inputs.push(InputItem {
            id: id.clone(),
            image: images[0].clone(),
            references: images[1..].to_vec(),
            embedding: embeddings[c][0].clone(),
            landmarks,
            pose: Some([pose.yaw, pose.pitch, pose.roll]),
        });
        for g in 0..counts.gallery_per_id {
            let (landmarks, pose) = face(&mut face_rng, c + g)?;
            let mut item = GalleryItem::new(id.clone(), embeddings[c][1 + g].clone());
            item.landmarks = Some(landmarks);
            item.pose = Some([pose.yaw, pose.pitch, pose.roll]);
            gallery.push(item);
        }
    }
    write_jsonl(dir.join(GALLERY_FILE), &gallery)?;
    write_jsonl(dir.join(INPUTS_FILE), &inputs)?;
    files.push(GALLERY_FILE.into());
    files.push(INPUTS_FILE.into());

    let (eval_gallery, records) = eval_fixtures(seed, counts);
    write_jsonl(dir.join(EVAL_GALLERY_FILE), &eval_gallery)?;
    write_jsonl(dir.join(RECORDS_FILE), &records)?;
    files.push(EVAL_GALLERY_FILE.into());
    files.push(RECORDS_FILE.into());
    files.sort();

    Ok(FixtureSummary {
        seed,
        counts: *counts,
        files,
    })
}

const ATTRIBUTES: [(&str, &[&str]); 3] = [
    ("expression", &["neutral", "smile", "surprise"]),
    ("gender", &["female", "male"]),
    ("age", &["young", "middle", "old"]),
];

/// A toy verification gallery and records whose anonymized embeddings are
/// partially displaced from the originals.
pub fn eval_fixtures(seed: u64, counts: &FixtureCounts) -> (Vec<GalleryItem>, Vec<EvalRecord>) {
    let clusters = clustered_embeddings(
        seed ^ S_EVAL,
        counts.eval_identities,
        counts.eval_per_id + 1,
        counts.embedding_dim,
        0.5,
    );
    let gallery = clusters
        .iter()
        .enumerate()
        .flat_map(|(c, members)| {
            members[1..]
                .iter()
                .map(move |e| GalleryItem::new(identity_name(c), e.clone()))
        })
        .collect();

    let mut rng = stream_rng(seed, S_EVAL);
    let records = (0..counts.eval_records)
        .map(|r| {
            let c = r % counts.eval_identities;
            let original = clusters[c][0].clone();
            let other = &clusters[(c + 1 + r / counts.eval_identities) % counts.eval_identities][0];
            let mix: f32 = rng.gen_range(0.0..1.0);
            let anonymized = unit(
                original
                    .iter()
                    .zip(other)
                    .map(|(a, b)| {
                        (1.0 - mix) * a + mix * b + 0.1 * gaussian(&mut rng) / (counts.embedding_dim as f32).sqrt()
                    })
                    .collect(),
            );
            let mut attributes_original = BTreeMap::new();
            let mut attributes_anonymized = BTreeMap::new();
            for (name, labels) in ATTRIBUTES {
                let a = labels[rng.gen_range(0..labels.len())];
                let b = if rng.gen_bool(0.8) {
                    a
                } else {
                    labels[rng.gen_range(0..labels.len())]
                };
                attributes_original.insert(name.to_string(), a.to_string());
                attributes_anonymized.insert(name.to_string(), b.to_string());
            }
            EvalRecord {
                source_id: identity_name(c),
                original_embedding: original,
                anonymized_embedding: anonymized,
                attributes_original,
                attributes_anonymized,
            }
        })
        .collect();
    (gallery, records)
}
