//! A small fixed classification network standing in for a pre-trained face
//! classifier.
//!
//! Architecture: two `3x3` convolutions (stride 2, padding 1, no bias) each
//! followed by ReLU, producing the activation stack `A` of shape `J x h x w`;
//! then global average pooling and a fully connected head. Because the head is
//! linear in `A`, the gradient of any logit with respect to `A` is the constant
//! `W[c][j] / Z` over every spatial position.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cam::ActivationStack;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PADDING: usize = 1;
const INIT_RANGE: f32 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiniNetConfig {
    pub input_channels: usize,
    pub input_size: usize,
    pub hidden_channels: usize,
    /// Channels `J` of the last convolutional layer.
    pub channels: usize,
    pub n_classes: usize,
    pub zero_bias: bool,
}

impl Default for MiniNetConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            input_size: 32,
            hidden_channels: 8,
            channels: 8,
            n_classes: 16,
            zero_bias: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniNet {
    input_shape: [usize; 3],
    conv: [Tensor; 2],
    head_weight: Tensor,
    head_bias: Tensor,
    seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub logits: Vec<f32>,
    pub softmax: Vec<f64>,
    /// Every class index, ordered by descending score; ties go to the lower index.
    pub top_k: Vec<usize>,
}

impl Prediction {
    pub fn from_logits(logits: Vec<f32>) -> Self {
        let softmax = softmax(&logits);
        let mut top_k: Vec<usize> = (0..logits.len()).collect();
        top_k.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        Self { logits, softmax, top_k }
    }

    pub fn top(&self, k: usize) -> &[usize] {
        &self.top_k[..k.min(self.top_k.len())]
    }

    /// The `k` lowest-ranked classes, lowest first.
    pub fn bottom(&self, k: usize) -> Vec<usize> {
        self.top_k.iter().rev().take(k).copied().collect()
    }
}

/// Max-shifted softmax in `f64`.
pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// A seeded uniform `[0, 1)` image matching `cfg`'s input shape.
pub fn random_image(cfg: &MiniNetConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [cfg.input_channels, cfg.input_size, cfg.input_size];
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen::<f32>()).collect())
}

fn conv_out(size: usize) -> usize {
    (size + 2 * PADDING - KERNEL) / STRIDE + 1
}

/// `3x3` convolution with stride 2 and zero padding 1, followed by ReLU.
fn conv_relu(input: &Tensor, weight: &Tensor) -> Tensor {
    let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let cout = weight.shape()[0];
    let (oh, ow) = (conv_out(h), conv_out(w));
    let x = input.data();
    let k = weight.data();
    let mut out = Vec::with_capacity(cout * oh * ow);
    for o in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for i in 0..cin {
                    for ky in 0..KERNEL {
                        let y = (oy * STRIDE + ky) as isize - PADDING as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..KERNEL {
                            let xx = (ox * STRIDE + kx) as isize - PADDING as isize;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let xv = x[(i * h + y as usize) * w + xx as usize] as f64;
                            let kv = k[((o * cin + i) * KERNEL + ky) * KERNEL + kx] as f64;
                            acc += xv * kv;
                        }
                    }
                }
                out.push(acc.max(0.0) as f32);
            }
        }
    }
    Tensor::from_parts(vec![cout, oh, ow], out)
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    input_shape: [usize; 3],
    seed: Option<u64>,
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

const TENSOR_NAMES: [&str; 4] = ["conv1.weight", "conv2.weight", "head.weight", "head.bias"];

impl MiniNet {
    /// Seeded uniform `[-0.1, 0.1]` initialization.
    pub fn random(cfg: &MiniNetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv1 = uniform_tensor(&mut rng, &[cfg.hidden_channels, cfg.input_channels, KERNEL, KERNEL]);
        let conv2 = uniform_tensor(&mut rng, &[cfg.channels, cfg.hidden_channels, KERNEL, KERNEL]);
        let head_weight = uniform_tensor(&mut rng, &[cfg.n_classes, cfg.channels]);
        let head_bias = if cfg.zero_bias {
            Tensor::zeros(&[cfg.n_classes])
        } else {
            uniform_tensor(&mut rng, &[cfg.n_classes])
        };
        Self {
            input_shape: [cfg.input_channels, cfg.input_size, cfg.input_size],
            conv: [conv1, conv2],
            head_weight,
            head_bias,
            seed: Some(seed),
        }
    }

    /// Assembles a network from explicit weights.
    pub fn from_weights(
        input_shape: [usize; 3],
        conv1: Tensor,
        conv2: Tensor,
        head_weight: Tensor,
        head_bias: Tensor,
    ) -> Result<Self> {
        let mismatch = |t: &Tensor, expected: Vec<usize>| Error::ShapeMismatch {
            left: t.shape().to_vec(),
            right: expected,
        };
        if conv1.rank() != 4 || conv1.shape()[1] != input_shape[0] || conv1.shape()[2..] != [KERNEL, KERNEL] {
            return Err(mismatch(&conv1, vec![conv1.shape()[0], input_shape[0], KERNEL, KERNEL]));
        }
        let hidden = conv1.shape()[0];
        if conv2.rank() != 4 || conv2.shape()[1] != hidden || conv2.shape()[2..] != [KERNEL, KERNEL] {
            return Err(mismatch(&conv2, vec![conv2.shape()[0], hidden, KERNEL, KERNEL]));
        }
        let net = Self {
            input_shape,
            conv: [conv1, conv2],
            head_weight: Tensor::zeros(&[1, 1]),
            head_bias: Tensor::zeros(&[1]),
            seed: None,
        };
        net.with_head(head_weight, head_bias)
    }

    /// Replaces the fully connected head. `weight` is `N x J`, `bias` is `N`.
    pub fn with_head(mut self, weight: Tensor, bias: Tensor) -> Result<Self> {
        let j = self.channels();
        if weight.rank() != 2 || weight.shape()[1] != j {
            return Err(Error::ShapeMismatch {
                left: weight.shape().to_vec(),
                right: vec![weight.shape()[0], j],
            });
        }
        if bias.shape() != [weight.shape()[0]] {
            return Err(Error::ShapeMismatch {
                left: bias.shape().to_vec(),
                right: vec![weight.shape()[0]],
            });
        }
        self.head_weight = weight;
        self.head_bias = bias;
        Ok(self)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn channels(&self) -> usize {
        self.conv[1].shape()[0]
    }

    pub fn n_classes(&self) -> usize {
        self.head_weight.shape()[0]
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// `[J, h, w]` of the activation stack.
    pub fn activation_shape(&self) -> [usize; 3] {
        let h = conv_out(conv_out(self.input_shape[1]));
        let w = conv_out(conv_out(self.input_shape[2]));
        [self.channels(), h, w]
    }

    pub fn head_weight(&self) -> &Tensor {
        &self.head_weight
    }

    pub fn head_bias(&self) -> &Tensor {
        &self.head_bias
    }

    pub fn has_zero_bias(&self) -> bool {
        self.head_bias.data().iter().all(|&b| b == 0.0)
    }

    pub fn head_row(&self, class_index: usize) -> Result<&[f32]> {
        self.check_class(class_index)?;
        let j = self.channels();
        Ok(&self.head_weight.data()[class_index * j..(class_index + 1) * j])
    }

    fn check_class(&self, class_index: usize) -> Result<()> {
        if class_index >= self.n_classes() {
            return Err(Error::InvalidClass {
                index: class_index,
                n_classes: self.n_classes(),
            });
        }
        Ok(())
    }

    fn check_activation(&self, a: &ActivationStack) -> Result<()> {
        let expected = self.activation_shape();
        if a.maps().shape() != expected {
            return Err(Error::ShapeMismatch {
                left: a.maps().shape().to_vec(),
                right: expected.to_vec(),
            });
        }
        Ok(())
    }

    /// Convolutional trunk only.
    pub fn activations(&self, image: &Tensor) -> Result<ActivationStack> {
        if image.shape() != self.input_shape {
            return Err(Error::ShapeMismatch {
                left: image.shape().to_vec(),
                right: self.input_shape.to_vec(),
            });
        }
        let hidden = conv_relu(image, &self.conv[0]);
        ActivationStack::new(conv_relu(&hidden, &self.conv[1]))
    }

    pub fn forward(&self, image: &Tensor) -> Result<(ActivationStack, Prediction)> {
        let a = self.activations(image)?;
        let (pred, _) = self.forward_from_activation(&a)?;
        Ok((a, pred))
    }

    /// Per-channel global average pool, in `f64`.
    fn pooled(&self, a: &ActivationStack) -> Vec<f64> {
        let z = a.spatial() as f64;
        (0..a.channels())
            .map(|j| a.channel(j).iter().map(|&v| v as f64).sum::<f64>() / z)
            .collect()
    }

    fn score_from_pooled(&self, pooled: &[f64], class_index: usize) -> f64 {
        let j = self.channels();
        let row = &self.head_weight.data()[class_index * j..(class_index + 1) * j];
        row.iter().zip(pooled).map(|(&w, &g)| w as f64 * g).sum::<f64>() + self.head_bias.data()[class_index] as f64
    }

    /// Runs only the head (GAP then FC). The identity feature is the pooled
    /// `J`-vector.
    pub fn forward_from_activation(&self, a: &ActivationStack) -> Result<(Prediction, Vec<f32>)> {
        self.check_activation(a)?;
        let pooled = self.pooled(a);
        let logits = (0..self.n_classes())
            .map(|c| self.score_from_pooled(&pooled, c) as f32)
            .collect();
        let feature = pooled.iter().map(|&g| g as f32).collect();
        Ok((Prediction::from_logits(logits), feature))
    }

    /// The class logit `y_c(A)` before rounding to `f32`.
    pub fn class_score(&self, a: &ActivationStack, class_index: usize) -> Result<f64> {
        self.check_activation(a)?;
        self.check_class(class_index)?;
        Ok(self.score_from_pooled(&self.pooled(a), class_index))
    }

    /// `d y_c / d A`, shape `J x h x w`. Constant `W[c][j] / Z` per channel.
    pub fn grad_wrt_activation(&self, a: &ActivationStack, class_index: usize) -> Result<Tensor> {
        self.check_activation(a)?;
        let row = self.head_row(class_index)?;
        let z = a.spatial();
        let mut data = Vec::with_capacity(row.len() * z);
        for &w in row {
            let g = (w as f64 / z as f64) as f32;
            data.extend(std::iter::repeat_n(g, z));
        }
        Ok(Tensor::from_parts(a.maps().shape().to_vec(), data))
    }

    fn tensors(&self) -> [&Tensor; 4] {
        [&self.conv[0], &self.conv[1], &self.head_weight, &self.head_bias]
    }

    /// Writes `manifest.json` plus one `ADT1` file per named tensor.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (name, tensor) in TENSOR_NAMES.iter().zip(self.tensors()) {
            let file = format!("{name}.adt");
            tensor.write_adt(dir.join(&file))?;
            entries.push(ManifestEntry {
                name: name.to_string(),
                shape: tensor.shape().to_vec(),
                file,
            });
        }
        let manifest = Manifest {
            input_shape: self.input_shape,
            seed: self.seed,
            tensors: entries,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut loaded = Vec::new();
        for name in TENSOR_NAMES {
            let entry = manifest
                .tensors
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::MissingInput(format!("tensor {name} in manifest")))?;
            let tensor = Tensor::read_adt(dir.join(&entry.file))?;
            if tensor.shape() != entry.shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    left: tensor.shape().to_vec(),
                    right: entry.shape.clone(),
                });
            }
            loaded.push(tensor);
        }
        let mut it = loaded.into_iter();
        let (c1, c2, w, b) = (
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
        );
        let mut net = Self::from_weights(manifest.input_shape, c1, c2, w, b)?;
        net.seed = manifest.seed;
        Ok(net)
    }
}
