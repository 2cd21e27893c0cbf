//! Grad-CAM: neuron importance weights and class heatmaps.
//!
//! For a class `c`, the importance of channel `j` is the spatial mean of
//! `d y_c / d A^j`, and the heatmap is `relu(sum_j alpha_j * A^j)` at the
//! resolution of the last convolutional layer.

use serde::{Deserialize, Serialize};

use crate::classifier::MiniNet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Output of the last convolutional layer: `J` maps of `h x w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationStack {
    maps: Tensor,
}

impl ActivationStack {
    pub fn new(maps: Tensor) -> Result<Self> {
        if maps.rank() != 3 {
            return Err(Error::InvalidShape {
                shape: maps.shape().to_vec(),
                len: maps.len(),
            });
        }
        if let Some(index) = maps.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { maps })
    }

    pub fn maps(&self) -> &Tensor {
        &self.maps
    }

    pub fn into_tensor(self) -> Tensor {
        self.maps
    }

    pub fn channels(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.maps.shape()[2]
    }

    /// Number of spatial positions `Z = h * w`.
    pub fn spatial(&self) -> usize {
        self.height() * self.width()
    }

    pub fn channel(&self, j: usize) -> &[f32] {
        let z = self.spatial();
        &self.maps.data()[j * z..(j + 1) * z]
    }

    /// The `h x w` map `sum_j weights_j * A^j`, accumulated in `f64`.
    pub fn weighted_sum(&self, weights: &[f64]) -> Result<Vec<f64>> {
        if weights.len() != self.channels() {
            return Err(Error::LengthMismatch {
                left: weights.len(),
                right: self.channels(),
            });
        }
        let mut out = vec![0.0f64; self.spatial()];
        for (j, &w) in weights.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.channel(j)) {
                *o += w * a as f64;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamResult {
    pub class_index: usize,
    pub alpha: Vec<f64>,
    pub heatmap: Tensor,
}

/// Channel importance `alpha_j = (1/Z) sum_{k,l} d y_c / d A^j_{kl}`.
pub fn neuron_importance(net: &MiniNet, a: &ActivationStack, class_index: usize) -> Result<Vec<f64>> {
    let grad = net.grad_wrt_activation(a, class_index)?;
    let z = a.spatial();
    Ok(grad
        .data()
        .chunks_exact(z)
        .map(|g| g.iter().map(|&v| v as f64).sum::<f64>() / z as f64)
        .collect())
}

/// `relu(sum_j alpha_j A^j)` as an `h x w` tensor.
pub fn heatmap(a: &ActivationStack, alpha: &[f64]) -> Result<Tensor> {
    let map = a.weighted_sum(alpha)?;
    Ok(Tensor::from_parts(
        vec![a.height(), a.width()],
        map.into_iter().map(|v| v.max(0.0) as f32).collect(),
    ))
}

pub fn grad_cam(net: &MiniNet, a: &ActivationStack, class_index: usize) -> Result<CamResult> {
    let alpha = neuron_importance(net, a, class_index)?;
    let heatmap = heatmap(a, &alpha)?;
    Ok(CamResult {
        class_index,
        alpha,
        heatmap,
    })
}

/// Rescales a heatmap to `[0, 1]` by its maximum, for display only.
pub fn normalize_for_display(heatmap: &Tensor) -> Tensor {
    let max = heatmap.data().iter().cloned().fold(0.0f32, f32::max);
    if max <= 0.0 {
        return Tensor::zeros(heatmap.shape());
    }
    heatmap.map(|v| v / max)
}

/// Binary (P5) PGM encoding of a display-normalized heatmap.
pub fn heatmap_to_pgm(heatmap: &Tensor) -> Vec<u8> {
    let norm = normalize_for_display(heatmap);
    let (h, w) = (heatmap.shape()[0], heatmap.shape()[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(norm.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}
