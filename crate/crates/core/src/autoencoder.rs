//! Convolutional autoencoder over binarized patch-attention matrices.
//!
//! Encoder: conv(1→8) → ReLU → conv(8→16) → ReLU → dense → latent.
//! Decoder mirrors it: dense → ReLU → deconv(16→8) → ReLU → deconv(8→1) →
//! sigmoid. All (de)convolutions are 3×3, stride 2, padding 1; the
//! transposed convolutions use an output padding that restores the encoder
//! sizes exactly. Training minimizes mean binary cross-entropy with Adam.

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, LoadError, Result};
use crate::patterns::BinaryMatrix;

const K: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;
const C1: usize = 8;
const C2: usize = 16;

#[inline]
fn c<T: Float>(x: f64) -> T {
    T::from(x).expect("representable constant")
}

fn conv_out(size: usize) -> usize {
    (size + 2 * PAD - K) / STRIDE + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AeConfig {
    pub latent: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            latent: 16,
            epochs: 50,
            batch: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    /// `[out][in][ky][kx]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Deconv<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    /// `[in][out][ky][kx]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    /// `[out][in]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Indices `i` in `0..count` whose tap `k` lands inside `0..limit`, i.e.
/// `0 <= STRIDE·i + k - PAD < limit`.
#[inline]
fn span(k: usize, limit: usize, count: usize) -> std::ops::Range<usize> {
    let lo = PAD.saturating_sub(k).div_ceil(STRIDE);
    let hi = (limit + PAD).saturating_sub(k).div_ceil(STRIDE).min(count);
    lo..hi.max(lo)
}

impl<T: Float> Conv<T> {
    fn zeros(in_ch: usize, out_ch: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            weight: vec![T::zero(); out_ch * in_ch * K * K],
            bias: vec![T::zero(); out_ch],
        }
    }

    fn forward(&self, input: &[T], si: usize, so: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.out_ch * so * so];
        for o in 0..self.out_ch {
            let plane = &mut out[o * so * so..(o + 1) * so * so];
            plane.fill(self.bias[o]);
            for ch in 0..self.in_ch {
                let src = &input[ch * si * si..(ch + 1) * si * si];
                for ky in 0..K {
                    for kx in 0..K {
                        let w = self.weight[((o * self.in_ch + ch) * K + ky) * K + kx];
                        let xs = span(kx, si, so);
                        for y in span(ky, si, so) {
                            let row_in = &src[(STRIDE * y + ky - PAD) * si..];
                            let row_out = &mut plane[y * so..(y + 1) * so];
                            for x in xs.clone() {
                                row_out[x] = row_out[x] + w * row_in[STRIDE * x + kx - PAD];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad`; returns the input
    /// gradient when `want_input`.
    fn backward(&self, input: &[T], g_out: &[T], si: usize, so: usize, grad: &mut Self, want_input: bool) -> Vec<T> {
        let mut g_in = if want_input { vec![T::zero(); self.in_ch * si * si] } else { Vec::new() };
        for o in 0..self.out_ch {
            let g_plane = &g_out[o * so * so..(o + 1) * so * so];
            grad.bias[o] = grad.bias[o] + g_plane.iter().fold(T::zero(), |a, &b| a + b);
            for ch in 0..self.in_ch {
                let src = &input[ch * si * si..(ch + 1) * si * si];
                for ky in 0..K {
                    for kx in 0..K {
                        let wi = ((o * self.in_ch + ch) * K + ky) * K + kx;
                        let w = self.weight[wi];
                        let xs = span(kx, si, so);
                        let mut acc = T::zero();
                        for y in span(ky, si, so) {
                            let base = (STRIDE * y + ky - PAD) * si;
                            let g_row = &g_plane[y * so..(y + 1) * so];
                            for x in xs.clone() {
                                let ii = base + STRIDE * x + kx - PAD;
                                acc = acc + g_row[x] * src[ii];
                                if want_input {
                                    let gi = ch * si * si + ii;
                                    g_in[gi] = g_in[gi] + g_row[x] * w;
                                }
                            }
                        }
                        grad.weight[wi] = grad.weight[wi] + acc;
                    }
                }
            }
        }
        g_in
    }
}

impl<T: Float> Deconv<T> {
    fn zeros(in_ch: usize, out_ch: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            weight: vec![T::zero(); in_ch * out_ch * K * K],
            bias: vec![T::zero(); out_ch],
        }
    }

    fn forward(&self, input: &[T], si: usize, so: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.out_ch * so * so];
        for o in 0..self.out_ch {
            let plane = &mut out[o * so * so..(o + 1) * so * so];
            plane.fill(self.bias[o]);
            for ch in 0..self.in_ch {
                let src = &input[ch * si * si..(ch + 1) * si * si];
                for ky in 0..K {
                    for kx in 0..K {
                        let w = self.weight[((ch * self.out_ch + o) * K + ky) * K + kx];
                        let xs = span(kx, so, si);
                        for iy in span(ky, so, si) {
                            let row_in = &src[iy * si..(iy + 1) * si];
                            let base = (STRIDE * iy + ky - PAD) * so;
                            for ix in xs.clone() {
                                let oi = base + STRIDE * ix + kx - PAD;
                                plane[oi] = plane[oi] + w * row_in[ix];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn backward(&self, input: &[T], g_out: &[T], si: usize, so: usize, grad: &mut Self) -> Vec<T> {
        let mut g_in = vec![T::zero(); self.in_ch * si * si];
        for o in 0..self.out_ch {
            let g_plane = &g_out[o * so * so..(o + 1) * so * so];
            grad.bias[o] = grad.bias[o] + g_plane.iter().fold(T::zero(), |a, &b| a + b);
            for ch in 0..self.in_ch {
                let src = &input[ch * si * si..(ch + 1) * si * si];
                for ky in 0..K {
                    for kx in 0..K {
                        let wi = ((ch * self.out_ch + o) * K + ky) * K + kx;
                        let w = self.weight[wi];
                        let xs = span(kx, so, si);
                        let mut acc = T::zero();
                        for iy in span(ky, so, si) {
                            let base = (STRIDE * iy + ky - PAD) * so;
                            for ix in xs.clone() {
                                let g = g_plane[base + STRIDE * ix + kx - PAD];
                                let ii = iy * si + ix;
                                acc = acc + g * src[ii];
                                let gi = ch * si * si + ii;
                                g_in[gi] = g_in[gi] + g * w;
                            }
                        }
                        grad.weight[wi] = grad.weight[wi] + acc;
                    }
                }
            }
        }
        g_in
    }
}

impl<T: Float> Dense<T> {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![T::zero(); inputs * outputs],
            bias: vec![T::zero(); outputs],
        }
    }

    fn forward(&self, input: &[T]) -> Vec<T> {
        (0..self.outputs)
            .map(|o| {
                self.weight[o * self.inputs..(o + 1) * self.inputs]
                    .iter()
                    .zip(input)
                    .fold(self.bias[o], |a, (&w, &x)| a + w * x)
            })
            .collect()
    }

    fn backward(&self, input: &[T], g_out: &[T], grad: &mut Self) -> Vec<T> {
        let mut g_in = vec![T::zero(); self.inputs];
        for (o, &g) in g_out.iter().enumerate() {
            grad.bias[o] = grad.bias[o] + g;
            let row = o * self.inputs;
            for i in 0..self.inputs {
                grad.weight[row + i] = grad.weight[row + i] + g * input[i];
                g_in[i] = g_in[i] + g * self.weight[row + i];
            }
        }
        g_in
    }
}

fn relu<T: Float>(v: &mut [T]) {
    for x in v.iter_mut() {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

fn relu_grad<T: Float>(activated: &[T], g: &mut [T]) {
    for (gv, &a) in g.iter_mut().zip(activated) {
        if a <= T::zero() {
            *gv = T::zero();
        }
    }
}

/// `max(z, 0) - z·y + ln(1 + e^{-|z|})`, the cross-entropy of
/// `sigmoid(z)` against target `y`.
fn bce_with_logit<T: Float>(z: T, y: T) -> T {
    z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln()
}

fn sigmoid<T: Float>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderWeights<T = f32> {
    /// Input side length (`p²` for a `p × p` patch grid).
    pub side: usize,
    pub latent: usize,
    pub enc1: Conv<T>,
    pub enc2: Conv<T>,
    pub enc_fc: Dense<T>,
    pub dec_fc: Dense<T>,
    pub dec1: Deconv<T>,
    pub dec2: Deconv<T>,
}

/// Activations retained for backpropagation.
struct Activations<T> {
    a1: Vec<T>,
    a2: Vec<T>,
    latent: Vec<T>,
    d0: Vec<T>,
    d1: Vec<T>,
    logits: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AeShape {
    pub side: usize,
    pub latent: usize,
}

impl<T: Float> AutoencoderWeights<T> {
    pub fn zeros(side: usize, latent: usize) -> Result<Self> {
        if side < 2 || latent == 0 {
            return Err(Error::arg(format!("autoencoder needs side >= 2 and latent >= 1 (got {side}, {latent})")));
        }
        let s2 = conv_out(conv_out(side));
        Ok(Self {
            side,
            latent,
            enc1: Conv::zeros(1, C1),
            enc2: Conv::zeros(C1, C2),
            enc_fc: Dense::zeros(C2 * s2 * s2, latent),
            dec_fc: Dense::zeros(latent, C2 * s2 * s2),
            dec1: Deconv::zeros(C2, C1),
            dec2: Deconv::zeros(C1, 1),
        })
    }

    /// Uniform `±1/sqrt(fan_in)` initialization from a seed.
    pub fn init(side: usize, latent: usize, seed: u64) -> Result<Self> {
        let mut w = Self::zeros(side, latent)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s2 = w.sizes().2;
        let fans = [K * K, C1 * K * K, C2 * s2 * s2, latent, C2 * K * K, C1 * K * K];
        for (tensors, fan) in w.layer_params_mut().into_iter().zip(fans) {
            let bound = 1.0 / (fan as f64).sqrt();
            for t in tensors {
                for v in t.iter_mut() {
                    *v = c(rng.random_range(-bound..bound));
                }
            }
        }
        Ok(w)
    }

    pub fn shape(&self) -> AeShape {
        AeShape {
            side: self.side,
            latent: self.latent,
        }
    }

    /// Spatial sizes after the input, first and second convolution.
    pub fn sizes(&self) -> (usize, usize, usize) {
        let s1 = conv_out(self.side);
        (self.side, s1, conv_out(s1))
    }

    fn layer_params_mut(&mut self) -> [[&mut Vec<T>; 2]; 6] {
        [
            [&mut self.enc1.weight, &mut self.enc1.bias],
            [&mut self.enc2.weight, &mut self.enc2.bias],
            [&mut self.enc_fc.weight, &mut self.enc_fc.bias],
            [&mut self.dec_fc.weight, &mut self.dec_fc.bias],
            [&mut self.dec1.weight, &mut self.dec1.bias],
            [&mut self.dec2.weight, &mut self.dec2.bias],
        ]
    }

    /// All parameter tensors in container order.
    pub fn params(&self) -> [&[T]; 12] {
        [
            &self.enc1.weight,
            &self.enc1.bias,
            &self.enc2.weight,
            &self.enc2.bias,
            &self.enc_fc.weight,
            &self.enc_fc.bias,
            &self.dec_fc.weight,
            &self.dec_fc.bias,
            &self.dec1.weight,
            &self.dec1.bias,
            &self.dec2.weight,
            &self.dec2.bias,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Vec<T>; 12] {
        let [[a, b], [c_, d], [e, f], [g, h], [i, j], [k, l]] = self.layer_params_mut();
        [a, b, c_, d, e, f, g, h, i, j, k, l]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn check_input(&self, x: &[T]) -> Result<()> {
        if x.len() != self.side * self.side {
            return Err(Error::shape(
                format!("{0}x{0} input", self.side),
                format!("{} values", x.len()),
            ));
        }
        Ok(())
    }

    fn encode_acts(&self, x: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let (s0, s1, s2) = self.sizes();
        let mut a1 = self.enc1.forward(x, s0, s1);
        relu(&mut a1);
        let mut a2 = self.enc2.forward(&a1, s1, s2);
        relu(&mut a2);
        let latent = self.enc_fc.forward(&a2);
        (a1, a2, latent)
    }

    fn forward_acts(&self, x: &[T]) -> Activations<T> {
        let (s0, s1, s2) = self.sizes();
        let (a1, a2, latent) = self.encode_acts(x);
        let mut d0 = self.dec_fc.forward(&latent);
        relu(&mut d0);
        let mut d1 = self.dec1.forward(&d0, s2, s1);
        relu(&mut d1);
        let logits = self.dec2.forward(&d1, s1, s0);
        Activations { a1, a2, latent, d0, d1, logits }
    }

    /// Latent code of one `side × side` input (row-major).
    pub fn encode(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_input(x)?;
        Ok(self.encode_acts(x).2)
    }

    /// Reconstruction probabilities.
    pub fn reconstruct(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_input(x)?;
        Ok(self.forward_acts(x).logits.into_iter().map(sigmoid).collect())
    }

    /// Mean binary cross-entropy over every cell of every sample.
    pub fn loss(&self, batch: &[&[T]]) -> Result<T> {
        let mut total = T::zero();
        for x in batch {
            self.check_input(x)?;
            let acts = self.forward_acts(x);
            for (&z, &y) in acts.logits.iter().zip(x.iter()) {
                total = total + bce_with_logit(z, y);
            }
        }
        Ok(total / c((batch.len() * self.side * self.side) as f64))
    }

    /// Mean loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, batch: &[&[T]]) -> Result<(T, Self)> {
        let (s0, s1, s2) = self.sizes();
        let mut grad = Self::zeros(self.side, self.latent)?;
        let scale: T = c(1.0 / (batch.len() * s0 * s0) as f64);
        let mut total = T::zero();
        for x in batch {
            self.check_input(x)?;
            let acts = self.forward_acts(x);
            let mut g_logits = Vec::with_capacity(acts.logits.len());
            for (&z, &y) in acts.logits.iter().zip(x.iter()) {
                total = total + bce_with_logit(z, y);
                g_logits.push((sigmoid(z) - y) * scale);
            }
            let mut g_d1 = self.dec2.backward(&acts.d1, &g_logits, s1, s0, &mut grad.dec2);
            relu_grad(&acts.d1, &mut g_d1);
            let mut g_d0 = self.dec1.backward(&acts.d0, &g_d1, s2, s1, &mut grad.dec1);
            relu_grad(&acts.d0, &mut g_d0);
            let g_latent = self.dec_fc.backward(&acts.latent, &g_d0, &mut grad.dec_fc);
            let mut g_a2 = self.enc_fc.backward(&acts.a2, &g_latent, &mut grad.enc_fc);
            relu_grad(&acts.a2, &mut g_a2);
            let mut g_a1 = self.enc2.backward(&acts.a1, &g_a2, s1, s2, &mut grad.enc2, true);
            relu_grad(&acts.a1, &mut g_a1);
            self.enc1.backward(x, &g_a1, s0, s1, &mut grad.enc1, false);
        }
        Ok((total * scale, grad))
    }

    /// Tensor names and shapes in container order.
    pub fn tensor_layout(&self) -> Vec<(String, Vec<usize>)> {
        let s2 = self.sizes().2;
        let flat = C2 * s2 * s2;
        vec![
            ("enc1.weight".into(), vec![C1, 1, K, K]),
            ("enc1.bias".into(), vec![C1]),
            ("enc2.weight".into(), vec![C2, C1, K, K]),
            ("enc2.bias".into(), vec![C2]),
            ("enc_fc.weight".into(), vec![self.latent, flat]),
            ("enc_fc.bias".into(), vec![self.latent]),
            ("dec_fc.weight".into(), vec![flat, self.latent]),
            ("dec_fc.bias".into(), vec![flat]),
            ("dec1.weight".into(), vec![C2, C1, K, K]),
            ("dec1.bias".into(), vec![C1]),
            ("dec2.weight".into(), vec![C1, 1, K, K]),
            ("dec2.bias".into(), vec![1]),
        ]
    }
}

impl AutoencoderWeights<f32> {
    pub fn from_tensors(shape: AeShape, tensors: Vec<Vec<f32>>) -> std::result::Result<Self, LoadError> {
        let mut w = Self::zeros(shape.side, shape.latent).map_err(|e| LoadError::Config(e.to_string()))?;
        let layout = w.tensor_layout();
        if tensors.len() != layout.len() {
            return Err(LoadError::Manifest(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((slot, (name, dims)), t) in w.params_mut().into_iter().zip(layout).zip(tensors) {
            if t.len() != slot.len() {
                return Err(LoadError::TensorShape {
                    name,
                    expected: dims,
                    found: vec![t.len()],
                });
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(LoadError::NonFinite(name));
            }
            *slot = t;
        }
        Ok(w)
    }
}

/// Adam state over a flat view of the parameters.
struct Adam<T> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Float> Adam<T> {
    fn new(lr: f64, shapes: &[usize]) -> Self {
        Self {
            lr: c(lr),
            beta1: c(0.9),
            beta2: c(0.999),
            eps: c(1e-8),
            step: 0,
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    fn update(&mut self, params: [&mut Vec<T>; 12], grads: [&[T]; 12]) {
        self.step += 1;
        let bc1 = T::one() - self.beta1.powi(self.step);
        let bc2 = T::one() - self.beta2.powi(self.step);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            for j in 0..p.len() {
                let m = self.beta1 * self.m[i][j] + (T::one() - self.beta1) * g[j];
                let v = self.beta2 * self.v[i][j] + (T::one() - self.beta2) * g[j] * g[j];
                self.m[i][j] = m;
                self.v[i][j] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                p[j] = p[j] - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss over the dataset before the first update.
    pub initial_loss: f64,
    /// Mean loss over the dataset after each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(self.initial_loss)
    }
}

/// Trains an autoencoder on equally sized binary matrices. Deterministic
/// for a given seed: initialization and per-epoch shuffles share one
/// seeded stream, and minibatch gradients are summed in sample order.
pub fn ae_train(dataset: &[BinaryMatrix], config: &AeConfig) -> Result<(AutoencoderWeights, TrainReport)> {
    let first = dataset.first().ok_or_else(|| Error::arg("autoencoder dataset is empty"))?;
    let side = first.side();
    if dataset.iter().any(|m| m.side() != side) {
        return Err(Error::arg("autoencoder inputs differ in size"));
    }
    if config.batch == 0 {
        return Err(Error::arg("batch size must be positive"));
    }
    let data: Vec<Vec<f32>> = dataset.iter().map(BinaryMatrix::as_f32).collect();
    let all: Vec<&[f32]> = data.iter().map(Vec::as_slice).collect();

    let mut weights = AutoencoderWeights::<f32>::init(side, config.latent, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0fae);
    let shapes: Vec<usize> = weights.params().iter().map(|p| p.len()).collect();
    let mut adam = Adam::new(config.lr, &shapes);
    let mut report = TrainReport {
        initial_loss: weights.loss(&all)? as f64,
        epoch_losses: Vec::with_capacity(config.epochs),
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch) {
            let batch: Vec<&[f32]> = chunk.iter().map(|&i| data[i].as_slice()).collect();
            let (_, grad) = weights.loss_and_grad(&batch)?;
            adam.update(weights.params_mut(), grad.params());
        }
        let loss = weights.loss(&all)? as f64;
        tracing::debug!(epoch, loss, "autoencoder epoch");
        report.epoch_losses.push(loss);
    }
    Ok((weights, report))
}

/// Bottleneck code of one binarized matrix.
pub fn ae_encode(weights: &AutoencoderWeights, input: &BinaryMatrix) -> Result<Vec<f32>> {
    weights.encode(&input.as_f32())
}

/// Finite-difference step: larger steps cross ReLU kinks, smaller ones
/// drown in roundoff.
pub const GRAD_CHECK_STEP: f64 = 1e-4;
/// Gradients below this magnitude are compared absolutely; they sit under
/// the loss's numerical resolution at [`GRAD_CHECK_STEP`].
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

/// Compares analytic gradients against central differences for every
/// parameter. Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_check(
    weights: &AutoencoderWeights<f64>,
    batch: &[&[f64]],
    step: f64,
    floor: f64,
) -> Result<GradCheck> {
    let (_, grad) = weights.loss_and_grad(batch)?;
    let analytic: Vec<Vec<f64>> = grad.params().iter().map(|p| p.to_vec()).collect();
    let mut probe = weights.clone();
    let mut out = GradCheck {
        checked: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
    };
    for (t, a_tensor) in analytic.iter().enumerate() {
        for (j, &a) in a_tensor.iter().enumerate() {
            let orig = probe.params()[t][j];
            probe.params_mut()[t][j] = orig + step;
            let plus = probe.loss(batch)?;
            probe.params_mut()[t][j] = orig - step;
            let minus = probe.loss(batch)?;
            probe.params_mut()[t][j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(floor);
            out.max_abs_error = out.max_abs_error.max(abs);
            out.max_rel_error = out.max_rel_error.max(rel);
            out.checked += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::planted_suite;

    #[test]
    fn tap_spans_match_brute_force() {
        for limit in 1..12 {
            for count in 1..8 {
                for k in 0..K {
                    let brute: Vec<usize> = (0..count)
                        .filter(|&i| (STRIDE * i + k).checked_sub(PAD).is_some_and(|v| v < limit))
                        .collect();
                    assert_eq!(span(k, limit, count).collect::<Vec<_>>(), brute, "{k} {limit} {count}");
                }
            }
        }
    }

    #[test]
    fn shapes_round_trip_sizes() {
        for side in [16usize, 64, 196, 9] {
            let w = AutoencoderWeights::<f32>::init(side, 16, 1).unwrap();
            let x = vec![0.0f32; side * side];
            assert_eq!(w.reconstruct(&x).unwrap().len(), side * side);
            assert_eq!(w.encode(&x).unwrap().len(), 16);
        }
        let w = AutoencoderWeights::<f32>::init(16, 16, 1).unwrap();
        assert!(w.encode(&[0.0; 15]).is_err());
        assert!(AutoencoderWeights::<f32>::zeros(1, 16).is_err());
    }

    #[test]
    fn gradients_match_central_differences() {
        let w = AutoencoderWeights::<f64>::init(8, 4, 3).unwrap();
        let suite = planted_suite(2, 3, 9);
        let xs: Vec<Vec<f64>> = suite
            .iter()
            .take(3)
            .map(|p| {
                // p = 2 gives 4x4 inputs; tile them onto 8x8
                let m = p.matrix.to_matrix::<f64>();
                (0..64).map(|i| m.get((i / 8) % 4, (i % 8) % 4)).collect()
            })
            .collect();
        let batch: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let check = gradient_check(&w, &batch, GRAD_CHECK_STEP, GRAD_CHECK_FLOOR).unwrap();
        assert_eq!(check.checked, w.param_count());
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let data: Vec<BinaryMatrix> = planted_suite(4, 4, 1).into_iter().map(|p| p.matrix).collect();
        let cfg = AeConfig {
            epochs: 2,
            batch: 4,
            ..AeConfig::default()
        };
        let (a, ra) = ae_train(&data, &cfg).unwrap();
        let (b, rb) = ae_train(&data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert!(ae_train(&[], &cfg).is_err());
    }

    #[test]
    fn memorizes_single_matrix() {
        let m = planted_suite(4, 1, 5).remove(0).matrix;
        let cfg = AeConfig {
            epochs: 300,
            batch: 1,
            lr: 3e-3,
            ..AeConfig::default()
        };
        let (w, report) = ae_train(std::slice::from_ref(&m), &cfg).unwrap();
        assert!(report.final_loss() < report.initial_loss);
        let recon = w.reconstruct(&m.as_f32()).unwrap();
        let thresholded: Vec<f32> = recon.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
        assert_eq!(thresholded, m.as_f32());
    }

    #[test]
    fn tensor_round_trip() {
        let w = AutoencoderWeights::<f32>::init(16, 16, 4).unwrap();
        let tensors: Vec<Vec<f32>> = w.params().iter().map(|p| p.to_vec()).collect();
        for ((_, dims), t) in w.tensor_layout().iter().zip(&tensors) {
            assert_eq!(dims.iter().product::<usize>(), t.len());
        }
        assert_eq!(AutoencoderWeights::from_tensors(w.shape(), tensors).unwrap(), w);
    }
}
