//! Facial geometry on the 68-point iBUG landmark scheme.
//!
//! Provides similarity (Procrustes) alignment, a weak-perspective pose
//! estimate with 15-degree buckets, and the recovery step that takes a
//! delegate structure and restores the original contour and mouth opening
//! while keeping the delegate's lip thickness.

use std::fmt;

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{
    build_candidate_set, delegate_probabilities, sample_index, CandidateFilter, CandidateQuery, DpConfig, GalleryItem,
    SamplingAudit, UtilityKind,
};
use crate::tensor::Tensor;

pub const N_LANDMARKS: usize = 68;

pub const CONTOUR: std::ops::Range<usize> = 0..17;
pub const BROWS: std::ops::Range<usize> = 17..27;
pub const NOSE: std::ops::Range<usize> = 27..36;
pub const EYES: std::ops::Range<usize> = 36..48;
pub const OUTER_LIP: std::ops::Range<usize> = 48..60;
pub const INNER_LIP: std::ops::Range<usize> = 60..68;

/// Upper/lower inner-lip pairs whose vertical gap defines the mouth opening.
pub const INNER_LIP_PAIRS: [(usize, usize); 3] = [(61, 67), (62, 66), (63, 65)];

/// Inner-lip point paired with each outer-lip point `48..60`.
const OUTER_TO_INNER: [usize; 12] = [60, 61, 61, 62, 63, 63, 64, 65, 65, 66, 67, 67];

/// Landmarks used for pose estimation: nose tip, chin, outer eye corners,
/// mouth corners.
pub const POSE_POINTS: [usize; 6] = [30, 8, 36, 45, 48, 54];

/// Width of a pose bucket in degrees.
pub const POSE_BUCKET_DEG: f64 = 15.0;

const MOUTH_TOL: f64 = 1e-9;

pub type Point = [f64; 2];

/// 68 image-space points `(x, y)`, `y` pointing down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point>", into = "Vec<Point>")]
pub struct LandmarkSet {
    points: Vec<Point>,
}

impl TryFrom<Vec<Point>> for LandmarkSet {
    type Error = Error;

    fn try_from(points: Vec<Point>) -> Result<Self> {
        Self::new(points)
    }
}

impl From<LandmarkSet> for Vec<Point> {
    fn from(s: LandmarkSet) -> Self {
        s.points
    }
}

impl LandmarkSet {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.len() != N_LANDMARKS {
            return Err(Error::InvalidLandmarks(format!(
                "expected {N_LANDMARKS} points, got {}",
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|p| !(p[0].is_finite() && p[1].is_finite())) {
            return Err(Error::InvalidLandmarks(format!("point {i} is not finite")));
        }
        let set = Self { points };
        let opening = set.mouth_opening();
        if opening < -MOUTH_TOL {
            return Err(Error::InvalidLandmarks(format!("negative mouth opening {opening}")));
        }
        Ok(set)
    }

    /// Additionally requires every point inside `[0, width] x [0, height]`.
    pub fn with_bounds(points: Vec<Point>, width: f64, height: f64) -> Result<Self> {
        let set = Self::new(points)?;
        if let Some(i) = set
            .points
            .iter()
            .position(|p| p[0] < 0.0 || p[1] < 0.0 || p[0] > width || p[1] > height)
        {
            return Err(Error::InvalidLandmarks(format!(
                "point {i} outside {width}x{height} bounds"
            )));
        }
        Ok(set)
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn contour(&self) -> &[Point] {
        &self.points[CONTOUR]
    }

    /// Per-pair vertical inner-lip gaps (lower minus upper).
    pub fn inner_lip_gaps(&self) -> [f64; 3] {
        INNER_LIP_PAIRS.map(|(u, l)| self.points[l][1] - self.points[u][1])
    }

    /// Mean vertical inner-lip gap.
    pub fn mouth_opening(&self) -> f64 {
        self.inner_lip_gaps().iter().sum::<f64>() / INNER_LIP_PAIRS.len() as f64
    }

    /// Outer-lip points minus their paired inner-lip points, for `48..60`.
    pub fn lip_thickness(&self) -> Vec<Point> {
        OUTER_LIP
            .zip(OUTER_TO_INNER)
            .map(|(o, i)| sub(self.points[o], self.points[i]))
            .collect()
    }

    pub fn transformed(&self, t: &SimilarityTransform) -> Self {
        Self {
            points: self.points.iter().map(|&p| t.apply(p)).collect(),
        }
    }

    pub fn centroid(&self) -> Point {
        centroid(&self.points)
    }
}

/// Root of the summed squared point distances.
pub fn l2_distance(a: &[Point], b: &[Point]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Largest coordinate difference.
pub fn max_abs_diff(a: &[Point], b: &[Point]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p[0] - q[0]).abs().max((p[1] - q[1]).abs()))
        .fold(0.0, f64::max)
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

fn centroid(points: &[Point]) -> Point {
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(x, y), p| (x + p[0], y + p[1]));
    [sx / n, sy / n]
}

/// `p -> scale * R(rotation) p + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub scale: f64,
    /// Counter-clockwise in the `(x, y)` frame, radians.
    pub rotation: f64,
    pub translation: Point,
}

impl SimilarityTransform {
    pub const IDENTITY: Self = Self {
        scale: 1.0,
        rotation: 0.0,
        translation: [0.0, 0.0],
    };

    pub fn apply(&self, p: Point) -> Point {
        let (s, c) = self.rotation.sin_cos();
        [
            self.scale * (c * p[0] - s * p[1]) + self.translation[0],
            self.scale * (s * p[0] + c * p[1]) + self.translation[1],
        ]
    }
}

/// Least-squares similarity transform taking `src` onto `dst`.
pub fn fit_similarity(src: &[Point], dst: &[Point]) -> Result<SimilarityTransform> {
    if src.len() != dst.len() {
        return Err(Error::LengthMismatch {
            left: src.len(),
            right: dst.len(),
        });
    }
    let (ms, md) = (centroid(src), centroid(dst));
    let (mut a, mut b, mut var) = (0.0, 0.0, 0.0);
    for (p, q) in src.iter().zip(dst) {
        let (x, y) = (p[0] - ms[0], p[1] - ms[1]);
        let (u, v) = (q[0] - md[0], q[1] - md[1]);
        a += x * u + y * v;
        b += x * v - y * u;
        var += x * x + y * y;
    }
    let spread = src
        .iter()
        .map(|p| (p[0] - ms[0]).abs().max((p[1] - ms[1]).abs()))
        .fold(0.0, f64::max);
    if !(spread > 1e-12) {
        return Err(Error::DegenerateAlignment);
    }
    let rotation = b.atan2(a);
    let scale = (a * a + b * b).sqrt() / var;
    let partial = SimilarityTransform {
        scale,
        rotation,
        translation: [0.0, 0.0],
    };
    let moved = partial.apply(ms);
    Ok(SimilarityTransform {
        translation: [md[0] - moved[0], md[1] - moved[1]],
        ..partial
    })
}

/// Aligns `src` onto `dst`, returning the moved set and the transform.
pub fn procrustes_align(src: &LandmarkSet, dst: &LandmarkSet) -> Result<(LandmarkSet, SimilarityTransform)> {
    let t = fit_similarity(&src.points, &dst.points)?;
    Ok((src.transformed(&t), t))
}

/// `l2` distance between `reference` and `other` after aligning `other` onto it.
pub fn geometry_distance(reference: &LandmarkSet, other: &LandmarkSet) -> Result<f64> {
    let (aligned, _) = procrustes_align(other, reference)?;
    Ok(l2_distance(&aligned.points, &reference.points))
}

/// Rebuilds a structure from an aligned delegate:
///
/// 1. contour points are copied from `original`;
/// 2. each inner-lip pair keeps the delegate's midpoint but takes the
///    original's vertical gap;
/// 3. outer-lip points are re-placed at their inner-lip partner plus the
///    delegate's thickness vector;
/// 4. every other point stays as in the delegate.
///
/// `aligned_delegate` must already be in `original`'s frame.
pub fn recover_pose_expression(original: &LandmarkSet, aligned_delegate: &LandmarkSet) -> Result<LandmarkSet> {
    let mut out = aligned_delegate.points.clone();
    out[CONTOUR].copy_from_slice(original.contour());

    for (u, l) in INNER_LIP_PAIRS {
        let mid = 0.5 * (aligned_delegate.points[u][1] + aligned_delegate.points[l][1]);
        let gap = original.points[l][1] - original.points[u][1];
        out[u][1] = mid - 0.5 * gap;
        out[l][1] = mid + 0.5 * gap;
    }

    for (o, i) in OUTER_LIP.zip(OUTER_TO_INNER) {
        let t = sub(aligned_delegate.points[o], aligned_delegate.points[i]);
        out[o] = [out[i][0] + t[0], out[i][1] + t[1]];
    }
    LandmarkSet::new(out)
}

/// Head rotation in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseAngles {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl PoseAngles {
    pub fn new(yaw: f64, pitch: f64, roll: f64) -> Self {
        Self { yaw, pitch, roll }
    }

    pub fn bucket(&self) -> PoseBucket {
        let q = |deg: f64| (deg / POSE_BUCKET_DEG).round() as i32;
        PoseBucket {
            yaw: q(self.yaw),
            pitch: q(self.pitch),
            roll: q(self.roll),
        }
    }

    /// `R = Rz(roll) Ry(yaw) Rx(pitch)`.
    pub fn rotation(&self) -> Matrix3<f64> {
        let (sy, cy) = self.yaw.to_radians().sin_cos();
        let (sp, cp) = self.pitch.to_radians().sin_cos();
        let (sr, cr) = self.roll.to_radians().sin_cos();
        let rz = Matrix3::new(cr, -sr, 0.0, sr, cr, 0.0, 0.0, 0.0, 1.0);
        let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
        let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cp, -sp, 0.0, sp, cp);
        rz * ry * rx
    }

    pub fn from_rotation(r: &Matrix3<f64>) -> Self {
        let yaw = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
        let pitch = r[(2, 1)].atan2(r[(2, 2)]);
        let roll = r[(1, 0)].atan2(r[(0, 0)]);
        Self::new(yaw.to_degrees(), pitch.to_degrees(), roll.to_degrees())
    }
}

/// Pose quantized to 15-degree cells centred on multiples of 15 degrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoseBucket {
    pub yaw: i32,
    pub pitch: i32,
    pub roll: i32,
}

impl fmt::Display for PoseBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = POSE_BUCKET_DEG as i32;
        write!(
            f,
            "yaw {}, pitch {}, roll {}",
            self.yaw * d,
            self.pitch * d,
            self.roll * d
        )
    }
}

/// Canonical 68-point face in a unit frame (`x` right, `y` up, `z` toward
/// the camera), mouth closed.
pub fn canonical_face() -> Vec<[f64; 3]> {
    let mut p = Vec::with_capacity(N_LANDMARKS);
    for i in 0..17 {
        let t = std::f64::consts::PI * i as f64 / 16.0;
        p.push([-0.95 * t.cos(), 0.2 - 1.25 * t.sin(), -0.6 + 0.5 * t.sin()]);
    }
    for side in [-1.0, 1.0] {
        for i in 0..5 {
            // Right brow runs outer-to-inner, left brow inner-to-outer.
            let u = if side < 0.0 { i } else { 4 - i } as f64 / 4.0;
            let x = side * (0.75 - 0.6 * u);
            let y = 0.55 + 0.08 * (std::f64::consts::PI * u).sin() + 0.04 * u;
            p.push([x, y, 0.05 * u]);
        }
    }
    for (i, y) in [0.4, 0.25, 0.1, -0.05].into_iter().enumerate() {
        p.push([0.0, y, 0.1 + 0.083 * i as f64]);
    }
    for (x, y, z) in [
        (-0.2, -0.15, 0.12),
        (-0.1, -0.17, 0.17),
        (0.0, -0.18, 0.2),
        (0.1, -0.17, 0.17),
        (0.2, -0.15, 0.12),
    ] {
        p.push([x, y, z]);
    }
    let eye = [
        (-0.58, 0.3),
        (-0.46, 0.36),
        (-0.34, 0.36),
        (-0.22, 0.3),
        (-0.34, 0.25),
        (-0.46, 0.25),
    ];
    for &(x, y) in &eye {
        p.push([x, y, if x < -0.5 { -0.05 } else { 0.0 }]);
    }
    for &(x, y) in &[
        (0.22, 0.3),
        (0.34, 0.36),
        (0.46, 0.36),
        (0.58, 0.3),
        (0.46, 0.25),
        (0.34, 0.25),
    ] {
        p.push([x, y, if x > 0.5 { -0.05 } else { 0.0 }]);
    }
    let outer = [
        (-0.35, -0.55),
        (-0.22, -0.47),
        (-0.08, -0.43),
        (0.0, -0.45),
        (0.08, -0.43),
        (0.22, -0.47),
        (0.35, -0.55),
        (0.22, -0.65),
        (0.08, -0.69),
        (0.0, -0.7),
        (-0.08, -0.69),
        (-0.22, -0.65),
    ];
    for (x, y) in outer {
        p.push([x, y, 0.12 - 0.15 * x.abs()]);
    }
    let inner = [
        (-0.3, -0.55),
        (-0.1, -0.53),
        (0.0, -0.53),
        (0.1, -0.53),
        (0.3, -0.55),
        (0.1, -0.57),
        (0.0, -0.57),
        (-0.1, -0.57),
    ];
    for (x, y) in inner {
        p.push([x, y, 0.08 - 0.1 * x.abs()]);
    }
    debug_assert_eq!(p.len(), N_LANDMARKS);
    p
}

/// Orthographic projection of 3D face points into image space.
pub fn project(points: &[[f64; 3]], pose: &PoseAngles, scale: f64, center: Point) -> Vec<Point> {
    let r = pose.rotation();
    points
        .iter()
        .map(|q| {
            let v = r * Vector3::new(q[0], q[1], q[2]);
            [center[0] + scale * v[0], center[1] - scale * v[1]]
        })
        .collect()
}

/// Weak-perspective head pose from the six [`POSE_POINTS`] matched against
/// [`canonical_face`].
pub fn estimate_pose(landmarks: &LandmarkSet) -> Result<PoseAngles> {
    let template = canonical_face();
    let model: Vec<Vector3<f64>> = POSE_POINTS
        .iter()
        .map(|&i| Vector3::new(template[i][0], template[i][1], template[i][2]))
        .collect();
    // Flip image y so both frames are y-up.
    let image: Vec<[f64; 2]> = POSE_POINTS
        .iter()
        .map(|&i| [landmarks.points[i][0], -landmarks.points[i][1]])
        .collect();
    let n = model.len() as f64;
    let model_mean = model.iter().fold(Vector3::zeros(), |a, v| a + v) / n;
    let image_mean = centroid(&image);

    let mut cov = Matrix3::zeros();
    let mut cross = [Vector3::zeros(), Vector3::zeros()];
    for (m, p) in model.iter().zip(&image) {
        let mc = m - model_mean;
        cov += mc * mc.transpose();
        cross[0] += mc * (p[0] - image_mean[0]);
        cross[1] += mc * (p[1] - image_mean[1]);
    }
    let inv = cov
        .try_inverse()
        .ok_or_else(|| Error::InvalidLandmarks("pose template is degenerate".into()))?;
    let r1 = inv * cross[0];
    let r2 = inv * cross[1];
    if !(r1.norm() > 1e-12 && r2.norm() > 1e-12) {
        return Err(Error::InvalidLandmarks("pose points are degenerate".into()));
    }
    let r1 = r1.normalize();
    let r3 = r1.cross(&r2).normalize();
    let r2 = r3.cross(&r1);
    let rot = Matrix3::from_rows(&[r1.transpose(), r2.transpose(), r3.transpose()]);
    Ok(PoseAngles::from_rotation(&rot))
}

pub fn pose_bucket(landmarks: &LandmarkSet) -> Result<PoseBucket> {
    Ok(estimate_pose(landmarks)?.bucket())
}

/// Background region descriptor carried alongside the structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundRegion {
    /// Binary `h x w` mask, 1 marking background.
    Mask(Tensor),
    /// Everything outside this polygon is background.
    OutsidePolygon(Vec<Point>),
}

impl BackgroundRegion {
    /// Region outside the face contour closed along the brows.
    pub fn outside_face(landmarks: &LandmarkSet) -> Self {
        let mut poly: Vec<Point> = landmarks.contour().to_vec();
        poly.extend(landmarks.points[BROWS].iter().rev());
        BackgroundRegion::OutsidePolygon(poly)
    }

    fn validate(&self, structure: &LandmarkSet) -> Result<()> {
        match self {
            BackgroundRegion::Mask(mask) => {
                if mask.rank() != 2 {
                    return Err(Error::InvalidConfig("background mask must be 2-D".into()));
                }
                if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::InvalidConfig("background mask must be binary".into()));
                }
                let (h, w) = (mask.shape()[0] as f64, mask.shape()[1] as f64);
                if structure
                    .points
                    .iter()
                    .any(|p| p[0] < 0.0 || p[1] < 0.0 || p[0] > w || p[1] > h)
                {
                    return Err(Error::InvalidConfig(format!(
                        "structure extends beyond the {w}x{h} background mask"
                    )));
                }
                Ok(())
            }
            BackgroundRegion::OutsidePolygon(poly) if poly.len() < 3 => Err(Error::InvalidConfig(
                "background polygon needs at least 3 points".into(),
            )),
            BackgroundRegion::OutsidePolygon(_) => Ok(()),
        }
    }
}

/// The anonymized structure fused with the background descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryInput {
    pub structure: LandmarkSet,
    pub background: BackgroundRegion,
}

impl GeometryInput {
    pub fn new(structure: LandmarkSet, background: BackgroundRegion) -> Result<Self> {
        background.validate(&structure)?;
        Ok(Self { structure, background })
    }
}

#[derive(Debug, Clone, Default)]
pub struct GeometryOptions {
    /// Pose of the query if known; otherwise estimated from its landmarks.
    pub query_pose: Option<PoseAngles>,
    pub exclude_id: Option<String>,
    pub utility: Option<UtilityKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryAnonymization {
    pub input: GeometryInput,
    pub delegate_id: String,
    pub aligned_delegate: LandmarkSet,
    pub transform: SimilarityTransform,
    pub pose_bucket: PoseBucket,
    pub audit: SamplingAudit,
}

/// Samples a same-pose delegate structure and recovers the original pose and
/// expression on it. Uses `cfg.seed` for the draw.
pub fn anonymize_geometry(
    original: &LandmarkSet,
    gallery: &[GalleryItem],
    k: usize,
    cfg: &DpConfig,
    background: BackgroundRegion,
    opts: &GeometryOptions,
) -> Result<GeometryAnonymization> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    anonymize_geometry_with(original, gallery, k, cfg, background, opts, &mut rng)
}

pub fn anonymize_geometry_with(
    original: &LandmarkSet,
    gallery: &[GalleryItem],
    k: usize,
    cfg: &DpConfig,
    background: BackgroundRegion,
    opts: &GeometryOptions,
    rng: &mut impl rand::Rng,
) -> Result<GeometryAnonymization> {
    cfg.validate()?;
    let bucket = match opts.query_pose {
        Some(p) => p.bucket(),
        None => pose_bucket(original)?,
    };
    let filter = CandidateFilter {
        exclude_id: opts.exclude_id.clone(),
        pose_bucket: Some(bucket),
    };
    let candidates = build_candidate_set(&CandidateQuery::Geometry(original), gallery, k, &filter)?;
    let utilities = opts
        .utility
        .unwrap_or(UtilityKind::Geometry)
        .compute(&candidates.distances)?;
    let probabilities = delegate_probabilities(&utilities.values, cfg)?;
    let chosen = sample_index(&probabilities, rng);

    let item = &gallery[candidates.indices[chosen]];
    let delegate = item
        .landmarks
        .as_ref()
        .ok_or_else(|| Error::MissingLandmarks { id: item.id.clone() })?;
    let (aligned, transform) = procrustes_align(delegate, original)?;
    let structure = recover_pose_expression(original, &aligned)?;
    let audit = SamplingAudit::new(gallery, &candidates, utilities, probabilities, chosen, cfg);
    Ok(GeometryAnonymization {
        input: GeometryInput::new(structure, background)?,
        delegate_id: item.id.clone(),
        aligned_delegate: aligned,
        transform,
        pose_bucket: bucket,
        audit,
    })
}

/// SVG overlay of several structures, one colour each.
pub fn svg_overlay(width: f64, height: f64, layers: &[(&str, &LandmarkSet)]) -> String {
    const COLOURS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    );
    for (i, (name, set)) in layers.iter().enumerate() {
        let colour = COLOURS[i % COLOURS.len()];
        s.push_str(&format!("  <g id=\"{name}\" fill=\"{colour}\">\n"));
        for p in set.points() {
            s.push_str(&format!(
                "    <circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"1.5\"/>\n",
                p[0], p[1]
            ));
        }
        s.push_str("  </g>\n");
    }
    s.push_str("</svg>\n");
    s
}
