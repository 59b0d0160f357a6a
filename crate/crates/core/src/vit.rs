//! Inference-only Vision Transformer with full attention capture.
//!
//! Blocks are pre-norm: `x += MHSA(LN(x)); x += MLP(LN(x))`. Every head's
//! post-softmax attention matrix is recorded, together with the attention
//! output `z = Concat(heads)·W_O + b` (before the residual add) and the
//! block output of each layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, LoadError, Result};
use crate::numerics::{softmax, softmax_in_place, Matrix, ProbVector};
use crate::pruning::{apply_prune, region_mask, PruneSpec};

const LN_EPS: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Image side length in pixels.
    pub image_size: usize,
    /// Patch side length in pixels.
    pub patch_size: usize,
    /// Embedding width.
    pub embed_dim: usize,
    pub layers: usize,
    /// Heads per layer.
    pub heads: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    /// The desk-scale reference model: 32px images, 8px patches, 4 layers of
    /// 4 heads over a 64-wide embedding.
    pub const TINY: ModelConfig = ModelConfig {
        image_size: 32,
        patch_size: 8,
        embed_dim: 64,
        layers: 4,
        heads: 4,
        num_classes: 10,
    };

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.patch_size == 0 || self.image_size == 0 {
            return Err("image and patch size must be positive".into());
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.layers == 0 || self.heads == 0 {
            return Err("need at least one layer and one head".into());
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(format!(
                "h not divisible by n ({} % {} != 0)",
                self.embed_dim, self.heads
            ));
        }
        if self.num_classes == 0 {
            return Err("need at least one class".into());
        }
        Ok(())
    }

    /// Patches per side, `p`.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Sequence length including the class token.
    pub fn tokens(&self) -> usize {
        1 + self.num_patches()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.embed_dim
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn total_heads(&self) -> usize {
        self.layers * self.heads
    }
}

/// A square RGB image, stored height × width × channel, already
/// standardized to the model's input range.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    side: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(side: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != side * side * 3 {
            return Err(Error::shape(
                format!("{side}x{side}x3 = {}", side * side * 3),
                data.len(),
            ));
        }
        Ok(Self { side, data })
    }

    /// Maps 8-bit RGB to `[0, 1]` then standardizes with mean 0.5 and
    /// std 0.5 per channel.
    pub fn from_rgb8(side: usize, rgb: &[u8]) -> Result<Self> {
        Self::new(side, rgb.iter().map(|&b| (b as f32 / 255.0 - 0.5) / 0.5).collect())
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.side + x) * 3 + c]
    }
}

/// Splits an image into `p²` flattened patches in row-major patch order;
/// each patch is flattened row, column, channel.
pub fn patchify(image: &Image, config: &ModelConfig) -> Result<Vec<Vec<f32>>> {
    if image.side() != config.image_size {
        return Err(Error::shape(
            format!("{0}x{0} image", config.image_size),
            format!("{0}x{0}", image.side()),
        ));
    }
    let (p, pz) = (config.grid(), config.patch_size);
    let mut patches = Vec::with_capacity(p * p);
    for py in 0..p {
        for px in 0..p {
            let mut v = Vec::with_capacity(config.patch_dim());
            for y in 0..pz {
                for x in 0..pz {
                    for c in 0..3 {
                        v.push(image.pixel(py * pz + y, px * pz + x, c));
                    }
                }
            }
            patches.push(v);
        }
    }
    Ok(patches)
}

/// `y = x·W + b` with `W` stored inputs × outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Matrix::zeros(inputs, outputs),
            bias: vec![0.0; outputs],
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul(&self.weight)?;
        y.add_row_vector(&self.bias);
        Ok(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

impl LayerNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }

    fn normalize(&self, row: &[f32], out: &mut [f32]) {
        let n = row.len() as f32;
        let mean = row.iter().sum::<f32>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (i, o) in out.iter_mut().enumerate() {
            *o = (row[i] - mean) * inv * self.gamma[i] + self.beta[i];
        }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            self.normalize(x.row(r), out.row_mut(r));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub norm1: LayerNorm,
    pub heads: Vec<HeadWeights>,
    /// `W_O` and `b`, embed × embed.
    pub output: Linear,
    pub norm2: LayerNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub patch_embed: Linear,
    pub cls_token: Vec<f32>,
    pub pos_embed: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: LayerNorm,
    pub classifier: Linear,
}

/// Everything recorded by one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub logits: Vec<f32>,
    pub probs: ProbVector,
    /// `attentions[layer][head]`, after any pruning was applied.
    pub attentions: Vec<Vec<Matrix>>,
    /// Attention output per layer, before the residual add.
    pub layer_z: Vec<Matrix>,
    /// Block output per layer.
    pub layer_o: Vec<Matrix>,
}

/// Scaled dot-product attention for one head: returns the row-stochastic
/// attention matrix and `A·V`.
pub fn attention_head(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<(Matrix, Matrix)> {
    if q.shape() != k.shape() || k.rows() != v.rows() {
        return Err(Error::shape(
            format!("Q, K of equal shape {:?} and V with {} rows", q.shape(), q.rows()),
            format!("K {:?}, V {:?}", k.shape(), v.shape()),
        ));
    }
    let a = attention_weights(q, k)?;
    let out = a.matmul(v)?;
    Ok((a, out))
}

fn attention_weights(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    let scale = 1.0 / (q.cols() as f32).sqrt();
    let mut a = q.matmul_transposed(k)?;
    for r in 0..a.rows() {
        let row = a.row_mut(r);
        row.iter_mut().for_each(|v| *v *= scale);
        softmax_in_place(row);
    }
    Ok(a)
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

impl ModelWeights {
    /// Seeded initialization: N(0, 0.02) projections, unit layernorms,
    /// zero biases, zero class token and positional encodings.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate().map_err(Error::Argument)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 0.02).expect("valid std");
        let mut linear = |i: usize, o: usize| Linear {
            weight: Matrix::from_fn(i, o, |_, _| normal.sample(&mut rng)),
            bias: vec![0.0; o],
        };
        let (h, dk) = (config.embed_dim, config.head_dim());
        let patch_embed = linear(config.patch_dim(), h);
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                norm1: LayerNorm::identity(h),
                heads: (0..config.heads)
                    .map(|_| HeadWeights {
                        query: linear(h, dk),
                        key: linear(h, dk),
                        value: linear(h, dk),
                    })
                    .collect(),
                output: linear(h, h),
                norm2: LayerNorm::identity(h),
                mlp_in: linear(h, config.mlp_dim()),
                mlp_out: linear(config.mlp_dim(), h),
            })
            .collect();
        let classifier = linear(h, config.num_classes);
        Ok(Self {
            config,
            patch_embed,
            cls_token: vec![0.0; h],
            pos_embed: Matrix::zeros(config.tokens(), h),
            layers,
            final_norm: LayerNorm::identity(h),
            classifier,
        })
    }

    /// Embeds the image into the `(1+p²) × h` token matrix: class token
    /// first, then patches, plus positional encodings.
    pub fn embed(&self, image: &Image) -> Result<Matrix> {
        let cfg = &self.config;
        let patches = patchify(image, cfg)?;
        let flat: Vec<f32> = patches.into_iter().flatten().collect();
        let patches = Matrix::from_vec(cfg.num_patches(), cfg.patch_dim(), flat)?;
        let emb = self.patch_embed.forward(&patches)?;
        let mut x = Matrix::zeros(cfg.tokens(), cfg.embed_dim);
        x.row_mut(0).copy_from_slice(&self.cls_token);
        for t in 0..cfg.num_patches() {
            x.row_mut(t + 1).copy_from_slice(emb.row(t));
        }
        x.add_assign(&self.pos_embed);
        Ok(x)
    }

    pub fn forward(&self, image: &Image, prune: Option<PruneSpec>) -> Result<ForwardTrace> {
        let cfg = &self.config;
        if let Some(spec) = prune {
            spec.check(cfg)?;
        }
        let (t, h, dk) = (cfg.tokens(), cfg.embed_dim, cfg.head_dim());
        let mut x = self.embed(image)?;
        let mut attentions = Vec::with_capacity(cfg.layers);
        let mut layer_z = Vec::with_capacity(cfg.layers);
        let mut layer_o = Vec::with_capacity(cfg.layers);

        for (li, layer) in self.layers.iter().enumerate() {
            let y = layer.norm1.forward(&x);
            let mut concat = Matrix::zeros(t, h);
            let mut heads = Vec::with_capacity(cfg.heads);
            for (hi, head) in layer.heads.iter().enumerate() {
                let q = head.query.forward(&y)?;
                let k = head.key.forward(&y)?;
                let v = head.value.forward(&y)?;
                let mut a = attention_weights(&q, &k)?;
                if let Some(spec) = prune.filter(|s| s.layer == li && s.head == hi) {
                    a = apply_prune(&a, &region_mask(spec.mode, cfg.grid()))?;
                }
                let out = a.matmul(&v)?;
                for r in 0..t {
                    concat.row_mut(r)[hi * dk..(hi + 1) * dk].copy_from_slice(out.row(r));
                }
                heads.push(a);
            }
            let z = layer.output.forward(&concat)?;
            x.add_assign(&z);

            let hidden = layer.mlp_in.forward(&layer.norm2.forward(&x))?.map(gelu);
            x.add_assign(&layer.mlp_out.forward(&hidden)?);

            attentions.push(heads);
            layer_z.push(z);
            layer_o.push(x.clone());
        }

        let cls = Matrix::from_vec(1, h, x.row(0).to_vec())?;
        let logits = self.classifier.forward(&self.final_norm.forward(&cls))?.into_vec();
        let probs = softmax(&logits)?;
        Ok(ForwardTrace {
            logits,
            probs,
            attentions,
            layer_z,
            layer_o,
        })
    }

    /// Canonical tensor names and shapes, in container order.
    pub fn tensor_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (h, dk, m) = (config.embed_dim, config.head_dim(), config.mlp_dim());
        let mut out = vec![
            ("patch_embed.weight".to_string(), vec![config.patch_dim(), h]),
            ("patch_embed.bias".to_string(), vec![h]),
            ("cls_token".to_string(), vec![h]),
            ("pos_embed".to_string(), vec![config.tokens(), h]),
        ];
        for l in 0..config.layers {
            let p = format!("layers.{l}");
            out.push((format!("{p}.norm1.gamma"), vec![h]));
            out.push((format!("{p}.norm1.beta"), vec![h]));
            for j in 0..config.heads {
                for proj in ["query", "key", "value"] {
                    out.push((format!("{p}.heads.{j}.{proj}.weight"), vec![h, dk]));
                    out.push((format!("{p}.heads.{j}.{proj}.bias"), vec![dk]));
                }
            }
            out.push((format!("{p}.output.weight"), vec![h, h]));
            out.push((format!("{p}.output.bias"), vec![h]));
            out.push((format!("{p}.norm2.gamma"), vec![h]));
            out.push((format!("{p}.norm2.beta"), vec![h]));
            out.push((format!("{p}.mlp_in.weight"), vec![h, m]));
            out.push((format!("{p}.mlp_in.bias"), vec![m]));
            out.push((format!("{p}.mlp_out.weight"), vec![m, h]));
            out.push((format!("{p}.mlp_out.bias"), vec![h]));
        }
        out.push(("final_norm.gamma".to_string(), vec![h]));
        out.push(("final_norm.beta".to_string(), vec![h]));
        out.push(("classifier.weight".to_string(), vec![h, config.num_classes]));
        out.push(("classifier.bias".to_string(), vec![config.num_classes]));
        out
    }

    /// Tensor data in [`Self::tensor_layout`] order.
    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![
            self.patch_embed.weight.data(),
            &self.patch_embed.bias,
            &self.cls_token,
            self.pos_embed.data(),
        ];
        for layer in &self.layers {
            out.push(&layer.norm1.gamma);
            out.push(&layer.norm1.beta);
            for head in &layer.heads {
                for lin in [&head.query, &head.key, &head.value] {
                    out.push(lin.weight.data());
                    out.push(&lin.bias);
                }
            }
            out.push(layer.output.weight.data());
            out.push(&layer.output.bias);
            out.push(&layer.norm2.gamma);
            out.push(&layer.norm2.beta);
            out.push(layer.mlp_in.weight.data());
            out.push(&layer.mlp_in.bias);
            out.push(layer.mlp_out.weight.data());
            out.push(&layer.mlp_out.bias);
        }
        out.push(&self.final_norm.gamma);
        out.push(&self.final_norm.beta);
        out.push(self.classifier.weight.data());
        out.push(&self.classifier.bias);
        out
    }

    /// Rebuilds weights from tensors given in [`Self::tensor_layout`] order.
    pub fn from_tensors(
        config: ModelConfig,
        tensors: Vec<Vec<f32>>,
    ) -> std::result::Result<Self, LoadError> {
        config.validate().map_err(LoadError::Config)?;
        let layout = Self::tensor_layout(&config);
        if tensors.len() != layout.len() {
            return Err(LoadError::Manifest(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        let mut it = layout.into_iter().zip(tensors);
        let mut next = || -> std::result::Result<(Vec<usize>, Vec<f32>), LoadError> {
            let ((name, shape), data) = it.next().expect("length checked");
            if data.len() != shape.iter().product::<usize>() {
                return Err(LoadError::TensorShape {
                    name,
                    expected: shape,
                    found: vec![data.len()],
                });
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(LoadError::NonFinite(name));
            }
            Ok((shape, data))
        };
        let mut take = Taker { next: &mut next };
        let patch_embed = take.linear()?;
        let cls_token = take.vector()?;
        let pos_embed = take.matrix()?;
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let norm1 = take.norm()?;
            let mut heads = Vec::with_capacity(config.heads);
            for _ in 0..config.heads {
                heads.push(HeadWeights {
                    query: take.linear()?,
                    key: take.linear()?,
                    value: take.linear()?,
                });
            }
            layers.push(LayerWeights {
                norm1,
                heads,
                output: take.linear()?,
                norm2: take.norm()?,
                mlp_in: take.linear()?,
                mlp_out: take.linear()?,
            });
        }
        Ok(Self {
            config,
            patch_embed,
            cls_token,
            pos_embed,
            layers,
            final_norm: take.norm()?,
            classifier: take.linear()?,
        })
    }
}

type NextTensor<'a> =
    &'a mut dyn FnMut() -> std::result::Result<(Vec<usize>, Vec<f32>), LoadError>;

struct Taker<'a> {
    next: NextTensor<'a>,
}

impl Taker<'_> {
    fn vector(&mut self) -> std::result::Result<Vec<f32>, LoadError> {
        Ok((self.next)()?.1)
    }

    fn matrix(&mut self) -> std::result::Result<Matrix, LoadError> {
        let (shape, data) = (self.next)()?;
        Ok(Matrix::from_vec(shape[0], shape[1], data).expect("validated"))
    }

    fn linear(&mut self) -> std::result::Result<Linear, LoadError> {
        Ok(Linear {
            weight: self.matrix()?,
            bias: self.vector()?,
        })
    }

    fn norm(&mut self) -> std::result::Result<LayerNorm, LoadError> {
        Ok(LayerNorm {
            gamma: self.vector()?,
            beta: self.vector()?,
        })
    }
}
