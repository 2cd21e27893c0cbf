//! Identity feature anonymization by attention distraction.
//!
//! Given the activation stack `A` and the Grad-CAM weights `alpha^c` of the
//! top-`K` predicted classes, a modulation `xi` is added so that the
//! class-weighted map `sum_j alpha^c_j (A + xi)^j` vanishes. The identity
//! feature is then recomputed from the distracted stack `A_hat = A + xi`.
//!
//! Two solvers are provided:
//!
//! * [`DistractionMode::PaperSum`] adds `w_i * alpha^{c_i} (x) Phi^{c_i}` per
//!   class, with `Phi = -(alpha A) / (alpha . alpha)`. Each term nulls its own
//!   class exactly; for `K > 1` the terms interfere unless the weight vectors
//!   are orthogonal.
//! * [`DistractionMode::ExactJoint`] projects every pixel's channel vector off
//!   the span of all `alpha^{c_i}`, the minimum-Frobenius-norm `xi` meeting
//!   every constraint at once. Per-class weights do not apply in this mode.
//!
//! A class whose weights have (near) zero norm carries no gradient signal; it
//! is skipped and listed in [`DistractionResult::skipped`].

use log::warn;
use serde::{Deserialize, Serialize};

use crate::cam::{heatmap, neuron_importance, ActivationStack};
use crate::classifier::{MiniNet, Prediction};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Squared-norm floor below which importance weights are treated as absent.
pub const DEGENERATE_NORM_SQ: f64 = 1e-12;

/// Relative tolerance used when building an orthonormal basis of the weights.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistractionMode {
    #[default]
    PaperSum,
    ExactJoint,
}

impl std::fmt::Display for DistractionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PaperSum => "paper-sum",
            Self::ExactJoint => "exact-joint",
        })
    }
}

impl std::str::FromStr for DistractionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-sum" => Ok(Self::PaperSum),
            "exact-joint" => Ok(Self::ExactJoint),
            other => Err(Error::InvalidDistraction(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistractionConfig {
    /// Number of top predictions to distract.
    pub k: usize,
    /// Per-class contributions `w_i`; empty means all ones.
    pub weights: Vec<f64>,
    pub mode: DistractionMode,
    /// Extra diversity terms built from the `bottom_j` lowest-ranked classes.
    pub bottom_j: usize,
    pub bottom_weight: f64,
}

impl Default for DistractionConfig {
    fn default() -> Self {
        Self {
            k: 2,
            weights: Vec::new(),
            mode: DistractionMode::PaperSum,
            bottom_j: 0,
            bottom_weight: 1.0,
        }
    }
}

impl DistractionConfig {
    pub fn top(k: usize) -> Self {
        Self { k, ..Self::default() }
    }

    pub fn with_mode(mut self, mode: DistractionMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidDistraction(msg));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.k > n_classes {
            return bad(format!("k = {} exceeds {} classes", self.k, n_classes));
        }
        if !self.weights.is_empty() && self.weights.len() != self.k {
            return bad(format!("{} weights given for k = {}", self.weights.len(), self.k));
        }
        if self.weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return bad("weights must be positive and finite".into());
        }
        if self.bottom_j > 0 && !(self.bottom_weight > 0.0 && self.bottom_weight.is_finite()) {
            return bad("bottom_weight must be positive and finite".into());
        }
        if self.k + self.bottom_j > n_classes {
            return bad(format!(
                "k + bottom_j = {} exceeds {} classes",
                self.k + self.bottom_j,
                n_classes
            ));
        }
        Ok(())
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights.get(i).copied().unwrap_or(1.0)
    }
}

/// Per-class outcome of a distraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistraction {
    pub class_index: usize,
    pub weight: f64,
    pub alpha: Vec<f64>,
    /// `Phi^c` (`h x w`); absent for skipped classes.
    pub phi: Option<Tensor>,
    pub skipped: bool,
    /// `||alpha^c A||_inf` before distraction.
    pub original_extent: f64,
    /// `||alpha^c A_hat||_inf` after distraction.
    pub residual: f64,
    /// Heatmap before distraction.
    pub heatmap: Tensor,
    /// `relu(alpha^c A_hat)` with the original weights.
    pub distracted_heatmap: Tensor,
    /// Grad-CAM rerun on `A_hat` with freshly computed weights.
    pub fresh_heatmap: Tensor,
}

impl ClassDistraction {
    /// `residual / max(1, original_extent)`.
    pub fn normalized_residual(&self) -> f64 {
        self.residual / self.original_extent.max(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistractionResult {
    pub mode: DistractionMode,
    pub a_hat: ActivationStack,
    pub xi: Tensor,
    /// Top-`K` classes, in rank order.
    pub classes: Vec<ClassDistraction>,
    /// Bottom-ranked diversity classes, if requested.
    pub diversity: Vec<ClassDistraction>,
    pub skipped: Vec<usize>,
    pub logits_before: Vec<f32>,
    pub logits_after: Vec<f32>,
    pub recast_feature: Vec<f32>,
}

impl DistractionResult {
    pub fn residuals(&self) -> Vec<f64> {
        self.classes.iter().map(|c| c.residual).collect()
    }

    pub fn max_normalized_residual(&self) -> f64 {
        self.classes
            .iter()
            .filter(|c| !c.skipped)
            .map(ClassDistraction::normalized_residual)
            .fold(0.0, f64::max)
    }
}

fn squared_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn phi_map(a: &ActivationStack, alpha: &[f64], class: Option<usize>) -> Result<Vec<f64>> {
    let norm_sq = squared_norm(alpha);
    if !(norm_sq > DEGENERATE_NORM_SQ) {
        return Err(Error::DegenerateAlpha { class, norm_sq });
    }
    Ok(a.weighted_sum(alpha)?.into_iter().map(|v| -v / norm_sq).collect())
}

/// The assistant matrix `Phi = -(sum_j alpha_j A^j) / (sum_j alpha_j^2)`.
pub fn assistant_matrix(a: &ActivationStack, alpha: &[f64]) -> Result<Tensor> {
    let phi = phi_map(a, alpha, None)?;
    Ok(Tensor::from_parts(
        vec![a.height(), a.width()],
        phi.into_iter().map(|v| v as f32).collect(),
    ))
}

/// Orthonormal basis of `span(vectors)` by twice-iterated Gram-Schmidt.
fn orthonormal_basis(vectors: &[&[f64]]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        let scale = squared_norm(v).sqrt();
        if scale == 0.0 {
            continue;
        }
        let mut u = v.to_vec();
        for _ in 0..2 {
            for q in &basis {
                let p: f64 = q.iter().zip(&u).map(|(a, b)| a * b).sum();
                u.iter_mut().zip(q).for_each(|(x, qi)| *x -= p * qi);
            }
        }
        let n = squared_norm(&u).sqrt();
        if n > RANK_TOL * scale {
            basis.push(u.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Adds `weight * alpha (x) phi` into the `J x Z` buffer `xi`.
fn add_outer(xi: &mut [f64], alpha: &[f64], phi: &[f64], weight: f64) {
    let z = phi.len();
    for (j, &aj) in alpha.iter().enumerate() {
        let row = &mut xi[j * z..(j + 1) * z];
        for (x, &p) in row.iter_mut().zip(phi) {
            *x += weight * aj * p;
        }
    }
}

/// Subtracts from every pixel's channel vector its projection onto `basis`.
fn add_joint_projection(xi: &mut [f64], a: &ActivationStack, basis: &[Vec<f64>]) {
    let (jn, z) = (a.channels(), a.spatial());
    let data = a.maps().data();
    for p in 0..z {
        for q in basis {
            let coeff: f64 = (0..jn).map(|j| q[j] * data[j * z + p] as f64).sum();
            for j in 0..jn {
                xi[j * z + p] -= coeff * q[j];
            }
        }
    }
}

struct ClassTerm {
    class_index: usize,
    weight: f64,
    alpha: Vec<f64>,
    phi: Option<Vec<f64>>,
}

fn class_terms(
    net: &MiniNet,
    a: &ActivationStack,
    classes: &[usize],
    weight: impl Fn(usize) -> f64,
) -> Result<Vec<ClassTerm>> {
    classes
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let alpha = neuron_importance(net, a, c)?;
            let phi = match phi_map(a, &alpha, Some(c)) {
                Ok(phi) => Some(phi),
                Err(Error::DegenerateAlpha { norm_sq, .. }) => {
                    warn!("class {c} has degenerate importance weights (|alpha|^2 = {norm_sq:e}); skipped");
                    None
                }
                Err(e) => return Err(e),
            };
            Ok(ClassTerm {
                class_index: c,
                weight: weight(i),
                alpha,
                phi,
            })
        })
        .collect()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn report(net: &MiniNet, a: &ActivationStack, a_hat: &ActivationStack, term: ClassTerm) -> Result<ClassDistraction> {
    let before = a.weighted_sum(&term.alpha)?;
    let after = a_hat.weighted_sum(&term.alpha)?;
    let fresh = neuron_importance(net, a_hat, term.class_index)?;
    Ok(ClassDistraction {
        class_index: term.class_index,
        weight: term.weight,
        skipped: term.phi.is_none(),
        phi: term
            .phi
            .map(|phi| Tensor::from_parts(vec![a.height(), a.width()], phi.into_iter().map(|v| v as f32).collect())),
        original_extent: inf_norm(&before),
        residual: inf_norm(&after),
        heatmap: heatmap(a, &term.alpha)?,
        distracted_heatmap: heatmap(a_hat, &term.alpha)?,
        fresh_heatmap: heatmap(a_hat, &fresh)?,
        alpha: term.alpha,
    })
}

/// Distracts the top-`K` classes of `pred` away from `a`.
pub fn distract(
    net: &MiniNet,
    a: &ActivationStack,
    pred: &Prediction,
    cfg: &DistractionConfig,
) -> Result<DistractionResult> {
    cfg.validate(net.n_classes())?;
    if pred.top_k.len() != net.n_classes() {
        return Err(Error::LengthMismatch {
            left: pred.top_k.len(),
            right: net.n_classes(),
        });
    }
    let top = pred.top(cfg.k).to_vec();
    let bottom: Vec<usize> = pred.bottom(cfg.bottom_j);

    let terms = class_terms(net, a, &top, |i| cfg.weight(i))?;
    let diversity_terms = class_terms(net, a, &bottom, |_| cfg.bottom_weight)?;

    let (jn, z) = (a.channels(), a.spatial());
    let mut xi = vec![0.0f64; jn * z];
    match cfg.mode {
        DistractionMode::PaperSum => {
            for t in &terms {
                if let Some(phi) = &t.phi {
                    add_outer(&mut xi, &t.alpha, phi, t.weight);
                }
            }
        }
        DistractionMode::ExactJoint => {
            let active: Vec<&[f64]> = terms
                .iter()
                .filter(|t| t.phi.is_some())
                .map(|t| t.alpha.as_slice())
                .collect();
            add_joint_projection(&mut xi, a, &orthonormal_basis(&active));
        }
    }
    for t in &diversity_terms {
        if let Some(phi) = &t.phi {
            add_outer(&mut xi, &t.alpha, phi, t.weight);
        }
    }

    let a_hat_data: Vec<f32> = a
        .maps()
        .data()
        .iter()
        .zip(&xi)
        .map(|(&av, &x)| (av as f64 + x) as f32)
        .collect();
    let a_hat = ActivationStack::new(Tensor::from_parts(a.maps().shape().to_vec(), a_hat_data))?;
    let xi = Tensor::from_parts(a.maps().shape().to_vec(), xi.into_iter().map(|v| v as f32).collect());

    let skipped = terms
        .iter()
        .chain(&diversity_terms)
        .filter(|t| t.phi.is_none())
        .map(|t| t.class_index)
        .collect();
    let classes = terms
        .into_iter()
        .map(|t| report(net, a, &a_hat, t))
        .collect::<Result<Vec<_>>>()?;
    let diversity = diversity_terms
        .into_iter()
        .map(|t| report(net, a, &a_hat, t))
        .collect::<Result<Vec<_>>>()?;

    let (after, recast_feature) = net.forward_from_activation(&a_hat)?;
    Ok(DistractionResult {
        mode: cfg.mode,
        a_hat,
        xi,
        classes,
        diversity,
        skipped,
        logits_before: pred.logits.clone(),
        logits_after: after.logits,
        recast_feature,
    })
}

/// Forward pass, distraction, and identity-feature recast in one call.
pub fn recast_identity(
    net: &MiniNet,
    image: &Tensor,
    cfg: &DistractionConfig,
) -> Result<(Vec<f32>, DistractionResult)> {
    cfg.validate(net.n_classes())?;
    let (a, pred) = net.forward(image)?;
    let result = distract(net, &a, &pred, cfg)?;
    Ok((result.recast_feature.clone(), result))
}

/// Every class whose `alpha^c A_hat` map is nulled to within `tol` (relative
/// to `max(1, ||alpha^c A||_inf)`).
pub fn nulled_classes(net: &MiniNet, a: &ActivationStack, a_hat: &ActivationStack, tol: f64) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for c in 0..net.n_classes() {
        let alpha = neuron_importance(net, a, c)?;
        if !(squared_norm(&alpha) > DEGENERATE_NORM_SQ) {
            continue;
        }
        let before = inf_norm(&a.weighted_sum(&alpha)?);
        let after = inf_norm(&a_hat.weighted_sum(&alpha)?);
        if after / before.max(1.0) < tol {
            out.push(c);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{random_image, MiniNetConfig};

    fn stack(data: Vec<f32>, shape: [usize; 3]) -> ActivationStack {
        ActivationStack::new(Tensor::new(shape.to_vec(), data).unwrap()).unwrap()
    }

    /// Net with a 1x1 activation grid (input 4 -> 2 -> 1) and two channels.
    fn pixel_net(rows: &[[f32; 2]]) -> MiniNet {
        let cfg = MiniNetConfig {
            input_size: 4,
            hidden_channels: 2,
            channels: 2,
            n_classes: rows.len(),
            ..MiniNetConfig::default()
        };
        let w: Vec<f32> = rows.iter().flatten().copied().collect();
        MiniNet::random(&cfg, 0)
            .with_head(
                Tensor::new(vec![rows.len(), 2], w).unwrap(),
                Tensor::zeros(&[rows.len()]),
            )
            .unwrap()
    }

    #[test]
    fn assistant_matrix_hand_values() {
        let a = stack(vec![2.0, 4.0], [2, 1, 1]);
        assert_eq!(assistant_matrix(&a, &[1.0, 1.0]).unwrap().data(), &[-3.0]);
        let a5 = stack(vec![5.0, 7.0], [2, 1, 1]);
        assert_eq!(assistant_matrix(&a5, &[1.0, 0.0]).unwrap().data(), &[-5.0]);
        let zero = stack(vec![0.0; 8], [2, 2, 2]);
        assert_eq!(assistant_matrix(&zero, &[0.3, 0.1]).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn assistant_matrix_rejects_zero_alpha() {
        let a = stack(vec![2.0, 4.0], [2, 1, 1]);
        assert!(matches!(
            assistant_matrix(&a, &[0.0, 1e-7]),
            Err(Error::DegenerateAlpha { class: None, .. })
        ));
    }

    #[test]
    fn single_pixel_hand_example() {
        // Z = 1, so alpha equals the head row [1, 1].
        let net = pixel_net(&[[1.0, 1.0], [0.5, -0.5]]);
        let a = stack(vec![2.0, 4.0], [2, 1, 1]);
        let (pred, _) = net.forward_from_activation(&a).unwrap();
        assert_eq!(pred.top_k[0], 0);
        let r = distract(&net, &a, &pred, &DistractionConfig::top(1)).unwrap();
        assert_eq!(r.xi.data(), &[-3.0, -3.0]);
        assert_eq!(r.a_hat.maps().data(), &[-1.0, 1.0]);
        assert_eq!(r.classes[0].residual, 0.0);
        assert_eq!(r.classes[0].phi.as_ref().unwrap().data(), &[-3.0]);
    }

    #[test]
    fn degenerate_class_is_skipped() {
        let net = pixel_net(&[[0.0, 0.0], [-1.0, -1.0]]);
        let a = stack(vec![2.0, 4.0], [2, 1, 1]);
        let (pred, _) = net.forward_from_activation(&a).unwrap();
        assert_eq!(pred.top_k[0], 0);
        let r = distract(&net, &a, &pred, &DistractionConfig::top(1)).unwrap();
        assert_eq!(r.skipped, vec![0]);
        assert!(r.classes[0].skipped);
        assert_eq!(r.a_hat, a);
    }

    #[test]
    fn config_validation() {
        let net = MiniNet::random(&MiniNetConfig::default(), 1);
        let image = random_image(&MiniNetConfig::default(), 1);
        assert!(recast_identity(&net, &image, &DistractionConfig::top(0)).is_err());
        assert!(recast_identity(&net, &image, &DistractionConfig::top(17)).is_err());
        let mut cfg = DistractionConfig::top(2);
        cfg.weights = vec![1.0];
        assert!(cfg.validate(16).is_err());
        cfg.weights = vec![1.0, -1.0];
        assert!(cfg.validate(16).is_err());
        cfg.weights = vec![1.0, 0.5];
        assert!(cfg.validate(16).is_ok());
        cfg.bottom_j = 15;
        assert!(cfg.validate(16).is_err());
    }

    #[test]
    fn orthogonal_alphas_make_modes_agree() {
        let net = pixel_net(&[[1.0, 0.0], [0.0, 1.0]]);
        let a = stack(vec![3.0, 2.0], [2, 1, 1]);
        let (pred, _) = net.forward_from_activation(&a).unwrap();
        let sum = distract(&net, &a, &pred, &DistractionConfig::top(2)).unwrap();
        let joint = distract(
            &net,
            &a,
            &pred,
            &DistractionConfig::top(2).with_mode(DistractionMode::ExactJoint),
        )
        .unwrap();
        for (x, y) in sum.a_hat.maps().data().iter().zip(joint.a_hat.maps().data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn non_orthogonal_alphas_interfere_in_paper_sum() {
        let net = pixel_net(&[[1.0, 0.2], [0.9, 0.4]]);
        let a = stack(vec![3.0, 2.0], [2, 1, 1]);
        let (pred, _) = net.forward_from_activation(&a).unwrap();
        let sum = distract(&net, &a, &pred, &DistractionConfig::top(2)).unwrap();
        assert!(sum.max_normalized_residual() > 1e-3);
        let joint = distract(
            &net,
            &a,
            &pred,
            &DistractionConfig::top(2).with_mode(DistractionMode::ExactJoint),
        )
        .unwrap();
        assert!(joint.max_normalized_residual() < 1e-6);
    }

    #[test]
    fn heatmaps_suppressed_and_logit_nulled() {
        let cfg = MiniNetConfig::default();
        let net = MiniNet::random(&cfg, 21);
        let image = random_image(&cfg, 22);
        let (feature, r) = recast_identity(&net, &image, &DistractionConfig::top(1)).unwrap();
        let c1 = &r.classes[0];
        assert!(c1.distracted_heatmap.max_abs() < 1e-5);
        assert!(c1.fresh_heatmap.max_abs() < 1e-5);
        let before = r.logits_before[c1.class_index] as f64;
        let after = net.class_score(&r.a_hat, c1.class_index).unwrap();
        assert!(after.abs() < 1e-4 * before.abs().max(1.0));
        assert_eq!(feature, r.recast_feature);
        for (h, (a, x)) in r
            .a_hat
            .maps()
            .data()
            .iter()
            .zip(net.activations(&image).unwrap().maps().data().iter().zip(r.xi.data()))
        {
            assert!((h - (a + x)).abs() < 1e-6);
        }
    }

    #[test]
    fn diversity_terms_are_reported() {
        let cfg = MiniNetConfig::default();
        let net = MiniNet::random(&cfg, 5);
        let image = random_image(&cfg, 6);
        let mut dc = DistractionConfig::top(2);
        dc.bottom_j = 3;
        let (_, r) = recast_identity(&net, &image, &dc).unwrap();
        assert_eq!(r.diversity.len(), 3);
        let (_, plain) = recast_identity(&net, &image, &DistractionConfig::top(2)).unwrap();
        assert_ne!(r.a_hat, plain.a_hat);
    }

    #[test]
    fn recast_is_deterministic() {
        let cfg = MiniNetConfig::default();
        let net = MiniNet::random(&cfg, 8);
        let image = random_image(&cfg, 9);
        let dc = DistractionConfig::top(3).with_mode(DistractionMode::ExactJoint);
        let (f1, _) = recast_identity(&net, &image, &dc).unwrap();
        let (f2, _) = recast_identity(&net, &image, &dc).unwrap();
        assert_eq!(
            f1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            f2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn joint_xi_lies_in_alpha_span() {
        let cfg = MiniNetConfig::default();
        let net = MiniNet::random(&cfg, 13);
        let image = random_image(&cfg, 14);
        let (_, r) = recast_identity(
            &net,
            &image,
            &DistractionConfig::top(3).with_mode(DistractionMode::ExactJoint),
        )
        .unwrap();
        let alphas: Vec<&[f64]> = r.classes.iter().map(|c| c.alpha.as_slice()).collect();
        let basis = orthonormal_basis(&alphas);
        assert_eq!(basis.len(), 3);
        let (jn, z) = (8, 64);
        let xi = r.xi.data();
        for p in 0..z {
            let v: Vec<f64> = (0..jn).map(|j| xi[j * z + p] as f64).collect();
            let mut rest = v.clone();
            for q in &basis {
                let c: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
                rest.iter_mut().zip(q).for_each(|(x, qi)| *x -= c * qi);
            }
            let scale = squared_norm(&v).sqrt().max(1e-12);
            assert!(squared_norm(&rest).sqrt() / scale < 1e-5);
        }
    }
}
