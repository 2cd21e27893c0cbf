//! Multi-task generator loss terms as pure functions over supplied features.
//!
//! Nothing here evaluates a network: discriminator outputs arrive as scalar
//! scores and perceptual/identity/appearance features as tensors. Expectations
//! are batch means. Each term has a reconstruction branch (`Z_id = f_x`) and a
//! cycle branch (`Z_id = f_y`), selected by [`LossMode`].
//!
//! | term | reconstruction | cycle |
//! |------|----------------|-------|
//! | `L1` adversarial | `LG(x, x^) + LD(x^)` | `b1 (LG(x, y^) + LD(y^)) + LG(y^, x-) + LD(x-)` |
//! | `L2` feature matching | mean per-layer `l1` | same |
//! | `L3` perceptual | `E[sum_i rho_i(x, x^)]` | `E[sum_i (b3 rho_i(x, y^) + rho_i(x-, x))]` |
//! | `L4` appearance | `E[l1(fa(x), fa(x^))] + E[max(0, cos(fa(x), f_x))]` | same |
//! | `L5` identity | `E[df(x^, x)]` | `E[b2 df(x^, y) + df(x-, x)]` |
//! | `L6` background | `E[|x_b - g_b|_1]` | same |

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    #[default]
    Reconstruction,
    Cycle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub lambda6: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 1.0,
            lambda5: 2.0,
            lambda6: 2.0,
            beta1: 0.6,
            beta2: 2.0,
            beta3: 0.8,
        }
    }
}

impl LossWeights {
    pub fn lambdas(&self) -> [f64; 6] {
        [
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lambda4,
            self.lambda5,
            self.lambda6,
        ]
    }
}

/// Distance used for each perceptual term `rho_i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureNorm {
    #[default]
    L2,
    L1,
}

/// Discriminator scores for one (real, fake) pairing, one entry per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HingeScores {
    pub real: Vec<f64>,
    pub fake: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePair {
    pub a: Tensor,
    pub b: Tensor,
}

impl FeaturePair {
    pub fn new(a: Tensor, b: Tensor) -> Self {
        Self { a, b }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceSample {
    /// `f_a(x)`
    pub fa_x: Vec<f32>,
    /// `f_a(x^)`
    pub fa_xhat: Vec<f32>,
    /// Identity feature `f_x`.
    pub f_x: Vec<f32>,
}

/// Inputs for every term. Slots named `*_back` hold the cycle branch's return
/// pairing `(y^, x-)` / `(x-, x)` and are ignored in reconstruction mode.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossInputs {
    pub mode: LossMode,
    /// `(x, x^)` in reconstruction, `(x, y^)` in cycle mode.
    pub adversarial: Option<HingeScores>,
    /// `(y^, x-)`.
    pub adversarial_back: Option<HingeScores>,
    /// Discriminator features for input and output images, one tensor per layer.
    pub feature_match: Option<(Vec<Tensor>, Vec<Tensor>)>,
    /// Per sample, one pair per perceptual network `i`.
    pub perceptual: Option<Vec<Vec<FeaturePair>>>,
    pub perceptual_back: Option<Vec<Vec<FeaturePair>>>,
    pub perceptual_norm: FeatureNorm,
    pub appearance: Option<Vec<AppearanceSample>>,
    /// `(f_x^, f_x)` in reconstruction, `(f_x^, f_y)` in cycle mode.
    pub identity: Option<Vec<FeaturePair>>,
    /// `(f_x-, f_x)`.
    pub identity_back: Option<Vec<FeaturePair>>,
    /// `(x_b, g_b)`.
    pub background: Option<(Tensor, Tensor)>,
}

fn require<'a, T>(slot: &'a Option<T>, name: &str, mode: LossMode) -> Result<&'a T> {
    slot.as_ref()
        .ok_or_else(|| Error::MissingInput(format!("{name} (mode {mode:?})")))
}

fn batch_mean<T>(batch: &[T], f: impl Fn(&T) -> Result<f64>) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::MissingInput("empty batch".into()));
    }
    let mut total = 0.0;
    for item in batch {
        total += f(item)?;
    }
    Ok(total / batch.len() as f64)
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_len(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

/// `E[max(0, 1 + D(fake)) + max(0, 1 - D(real))]`.
pub fn hinge_generator(scores: &HingeScores) -> Result<f64> {
    if scores.real.len() != scores.fake.len() {
        return Err(Error::LengthMismatch {
            left: scores.real.len(),
            right: scores.fake.len(),
        });
    }
    let pairs: Vec<(f64, f64)> = scores.real.iter().copied().zip(scores.fake.iter().copied()).collect();
    batch_mean(
        &pairs,
        |&(real, fake)| Ok((1.0 + fake).max(0.0) + (1.0 - real).max(0.0)),
    )
}

/// `E[-D(fake)]`.
pub fn hinge_discriminator(fake: &[f64]) -> Result<f64> {
    batch_mean(fake, |&d| Ok(-d))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdversarialLoss {
    /// Hinge terms (`LG` parts), weighted per branch.
    pub generator: f64,
    /// `LD` parts, weighted per branch. May be negative.
    pub discriminator: f64,
}

impl AdversarialLoss {
    pub fn total(&self) -> f64 {
        self.generator + self.discriminator
    }
}

/// `L1`.
pub fn adv_loss(inputs: &LossInputs, weights: &LossWeights) -> Result<AdversarialLoss> {
    let primary = require(&inputs.adversarial, "adversarial scores", inputs.mode)?;
    let g = hinge_generator(primary)?;
    let d = hinge_discriminator(&primary.fake)?;
    match inputs.mode {
        LossMode::Reconstruction => Ok(AdversarialLoss {
            generator: g,
            discriminator: d,
        }),
        LossMode::Cycle => {
            let back = require(&inputs.adversarial_back, "adversarial_back scores", inputs.mode)?;
            Ok(AdversarialLoss {
                generator: weights.beta1 * g + hinge_generator(back)?,
                discriminator: weights.beta1 * d + hinge_discriminator(&back.fake)?,
            })
        }
    }
}

/// Mean absolute difference.
pub fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same(a, b)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum::<f64>()
        / a.len() as f64)
}

/// `L2`: mean over layers of each layer's mean absolute difference.
pub fn feature_match_loss(feats_a: &[Tensor], feats_b: &[Tensor]) -> Result<f64> {
    if feats_a.len() != feats_b.len() {
        return Err(Error::LengthMismatch {
            left: feats_a.len(),
            right: feats_b.len(),
        });
    }
    let layers: Vec<(&Tensor, &Tensor)> = feats_a.iter().zip(feats_b).collect();
    batch_mean(&layers, |(a, b)| mean_abs_diff(a, b))
}

pub fn feature_distance(pair: &FeaturePair, norm: FeatureNorm) -> Result<f64> {
    check_same(&pair.a, &pair.b)?;
    let diffs = pair
        .a
        .data()
        .iter()
        .zip(pair.b.data())
        .map(|(&x, &y)| x as f64 - y as f64);
    Ok(match norm {
        FeatureNorm::L2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
        FeatureNorm::L1 => diffs.map(f64::abs).sum(),
    })
}

fn rho_sum(pairs: &[FeaturePair], norm: FeatureNorm) -> Result<f64> {
    pairs.iter().map(|p| feature_distance(p, norm)).sum()
}

/// `L3`.
pub fn perceptual_loss(inputs: &LossInputs, weights: &LossWeights) -> Result<f64> {
    let norm = inputs.perceptual_norm;
    let primary = require(&inputs.perceptual, "perceptual pairs", inputs.mode)?;
    match inputs.mode {
        LossMode::Reconstruction => batch_mean(primary, |pairs| rho_sum(pairs, norm)),
        LossMode::Cycle => {
            let back = require(&inputs.perceptual_back, "perceptual_back pairs", inputs.mode)?;
            if back.len() != primary.len() {
                return Err(Error::LengthMismatch {
                    left: primary.len(),
                    right: back.len(),
                });
            }
            let samples: Vec<(&Vec<FeaturePair>, &Vec<FeaturePair>)> = primary.iter().zip(back).collect();
            batch_mean(&samples, |(fwd, bwd)| {
                if fwd.len() != bwd.len() {
                    return Err(Error::LengthMismatch {
                        left: fwd.len(),
                        right: bwd.len(),
                    });
                }
                fwd.iter()
                    .zip(bwd.iter())
                    .map(|(f, b)| Ok(weights.beta3 * feature_distance(f, norm)? + feature_distance(b, norm)?))
                    .sum()
            })
        }
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    check_len(a, b)?;
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

/// One sample of `L4`: `l1(fa(x), fa(x^)) + max(0, cos(fa(x), f_x))`.
pub fn appearance_loss(fa_x: &[f32], fa_xhat: &[f32], f_x: &[f32]) -> Result<f64> {
    check_len(fa_x, fa_xhat)?;
    let l1: f64 = fa_x
        .iter()
        .zip(fa_xhat)
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum();
    Ok(l1 + cosine(fa_x, f_x)?.max(0.0))
}

/// `L4` over a batch.
pub fn appearance_loss_batch(inputs: &LossInputs) -> Result<f64> {
    let batch = require(&inputs.appearance, "appearance features", inputs.mode)?;
    batch_mean(batch, |s| appearance_loss(&s.fa_x, &s.fa_xhat, &s.f_x))
}

/// `L5`, with `d_f` the `l2` distance.
pub fn identity_loss(inputs: &LossInputs, weights: &LossWeights) -> Result<f64> {
    let primary = require(&inputs.identity, "identity features", inputs.mode)?;
    let d = |p: &FeaturePair| feature_distance(p, FeatureNorm::L2);
    match inputs.mode {
        LossMode::Reconstruction => batch_mean(primary, d),
        LossMode::Cycle => {
            let back = require(&inputs.identity_back, "identity_back features", inputs.mode)?;
            if back.len() != primary.len() {
                return Err(Error::LengthMismatch {
                    left: primary.len(),
                    right: back.len(),
                });
            }
            let samples: Vec<(&FeaturePair, &FeaturePair)> = primary.iter().zip(back).collect();
            batch_mean(&samples, |(f, b)| Ok(weights.beta2 * d(f)? + d(b)?))
        }
    }
}

/// `L6`: mean absolute difference of the background images.
pub fn background_loss(xb: &Tensor, gb: &Tensor) -> Result<f64> {
    mean_abs_diff(xb, gb)
}

/// `L_All = sum_i lambda_i L_i`.
pub fn total_loss(components: &[f64; 6], weights: &LossWeights) -> f64 {
    components.iter().zip(weights.lambdas()).map(|(c, l)| c * l).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mode: LossMode,
    pub adversarial: Option<AdversarialLoss>,
    /// `L1` .. `L6`; absent where inputs were not supplied.
    pub components: [Option<f64>; 6],
    /// Present only when all six components are.
    pub total: Option<f64>,
}

/// Evaluates every term whose inputs are present.
pub fn evaluate(inputs: &LossInputs, weights: &LossWeights) -> Result<LossBreakdown> {
    let adversarial = inputs
        .adversarial
        .as_ref()
        .map(|_| adv_loss(inputs, weights))
        .transpose()?;
    let components = [
        adversarial.map(|a| a.total()),
        inputs
            .feature_match
            .as_ref()
            .map(|(a, b)| feature_match_loss(a, b))
            .transpose()?,
        inputs
            .perceptual
            .as_ref()
            .map(|_| perceptual_loss(inputs, weights))
            .transpose()?,
        inputs
            .appearance
            .as_ref()
            .map(|_| appearance_loss_batch(inputs))
            .transpose()?,
        inputs
            .identity
            .as_ref()
            .map(|_| identity_loss(inputs, weights))
            .transpose()?,
        inputs
            .background
            .as_ref()
            .map(|(x, g)| background_loss(x, g))
            .transpose()?,
    ];
    let total = components
        .iter()
        .copied()
        .collect::<Option<Vec<f64>>>()
        .map(|c| total_loss(&[c[0], c[1], c[2], c[3], c[4], c[5]], weights));
    Ok(LossBreakdown {
        mode: inputs.mode,
        adversarial,
        components,
        total,
    })
}

/// File-backed loss inputs. Tensor paths are relative to the manifest's
/// directory; batched slots carry the batch on their first axis.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossManifest {
    pub mode: LossMode,
    pub weights: Option<LossWeights>,
    pub perceptual_norm: FeatureNorm,
    /// Rank-1 score tensors of length `B`.
    pub adversarial: Option<ScorePaths>,
    pub adversarial_back: Option<ScorePaths>,
    pub feature_match: Option<LayerPaths>,
    /// One entry per perceptual network, each `B x D`.
    pub perceptual: Option<Vec<PairPaths>>,
    pub perceptual_back: Option<Vec<PairPaths>>,
    pub appearance: Option<AppearancePaths>,
    pub identity: Option<PairPaths>,
    pub identity_back: Option<PairPaths>,
    pub background: Option<PairPaths>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorePaths {
    pub real: PathBuf,
    pub fake: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPaths {
    pub a: Vec<PathBuf>,
    pub b: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairPaths {
    pub a: PathBuf,
    pub b: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppearancePaths {
    pub fa_x: PathBuf,
    pub fa_xhat: PathBuf,
    pub f_x: PathBuf,
}

/// Splits a `B x ...` tensor into `B` rows.
fn rows(t: &Tensor) -> Result<Vec<Tensor>> {
    if t.rank() < 2 {
        return Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            len: t.len(),
        });
    }
    let b = t.shape()[0];
    let inner = t.shape()[1..].to_vec();
    let n = t.len() / b;
    Ok(t.data()
        .chunks_exact(n)
        .map(|c| Tensor::from_parts(inner.clone(), c.to_vec()))
        .collect())
}

fn scores(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

impl LossManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, PathBuf)> {
        let path = path.as_ref();
        let manifest: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((manifest, base))
    }

    pub fn weights(&self) -> LossWeights {
        self.weights.unwrap_or_default()
    }

    /// Reads every referenced tensor.
    pub fn resolve(&self, base: &Path) -> Result<LossInputs> {
        let read = |p: &PathBuf| Tensor::read_adt(base.join(p));
        let score_pair = |s: &ScorePaths| -> Result<HingeScores> {
            Ok(HingeScores {
                real: scores(&read(&s.real)?),
                fake: scores(&read(&s.fake)?),
            })
        };
        let pair_rows = |p: &PairPaths| -> Result<Vec<FeaturePair>> {
            let (a, b) = (rows(&read(&p.a)?)?, rows(&read(&p.b)?)?);
            if a.len() != b.len() {
                return Err(Error::LengthMismatch {
                    left: a.len(),
                    right: b.len(),
                });
            }
            Ok(a.into_iter().zip(b).map(|(a, b)| FeaturePair::new(a, b)).collect())
        };
        // Transposes network-major pairs into sample-major lists.
        let per_sample = |nets: &[PairPaths]| -> Result<Vec<Vec<FeaturePair>>> {
            let mut out: Vec<Vec<FeaturePair>> = Vec::new();
            for (i, net) in nets.iter().enumerate() {
                let pairs = pair_rows(net)?;
                if i == 0 {
                    out = pairs.into_iter().map(|p| vec![p]).collect();
                } else if pairs.len() != out.len() {
                    return Err(Error::LengthMismatch {
                        left: out.len(),
                        right: pairs.len(),
                    });
                } else {
                    out.iter_mut().zip(pairs).for_each(|(s, p)| s.push(p));
                }
            }
            Ok(out)
        };

        let appearance = match &self.appearance {
            None => None,
            Some(p) => {
                let (fa, fh, fx) = (rows(&read(&p.fa_x)?)?, rows(&read(&p.fa_xhat)?)?, rows(&read(&p.f_x)?)?);
                if fa.len() != fh.len() || fa.len() != fx.len() {
                    return Err(Error::LengthMismatch {
                        left: fa.len(),
                        right: fh.len().min(fx.len()),
                    });
                }
                Some(
                    fa.into_iter()
                        .zip(fh)
                        .zip(fx)
                        .map(|((a, h), x)| AppearanceSample {
                            fa_x: a.into_data(),
                            fa_xhat: h.into_data(),
                            f_x: x.into_data(),
                        })
                        .collect(),
                )
            }
        };

        Ok(LossInputs {
            mode: self.mode,
            adversarial: self.adversarial.as_ref().map(score_pair).transpose()?,
            adversarial_back: self.adversarial_back.as_ref().map(score_pair).transpose()?,
            feature_match: self
                .feature_match
                .as_ref()
                .map(|l| -> Result<_> {
                    Ok((
                        l.a.iter().map(read).collect::<Result<Vec<_>>>()?,
                        l.b.iter().map(read).collect::<Result<Vec<_>>>()?,
                    ))
                })
                .transpose()?,
            perceptual: self.perceptual.as_deref().map(per_sample).transpose()?,
            perceptual_back: self.perceptual_back.as_deref().map(per_sample).transpose()?,
            perceptual_norm: self.perceptual_norm,
            appearance,
            identity: self.identity.as_ref().map(pair_rows).transpose()?,
            identity_back: self.identity_back.as_ref().map(pair_rows).transpose()?,
            background: self
                .background
                .as_ref()
                .map(|p| -> Result<_> { Ok((read(&p.a)?, read(&p.b)?)) })
                .transpose()?,
        })
    }
}
