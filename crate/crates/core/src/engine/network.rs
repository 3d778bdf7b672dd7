//! A small convolutional classifier with hand-written reverse-mode
//! gradients.
//!
//! Layout: `blocks` of conv -> ReLU -> optional 2x2 max-pool, then global
//! average pooling (the latent vector), an optional ReLU hidden layer, and a
//! linear output layer producing one logit per class. Parameters are kept in
//! declaration order: for every block its kernel `[out, in, k, k]` and bias
//! `[out]`, then the hidden weight/bias, then the output weight/bias.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ConvNetConfig, Pooling, TrainConfig};
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::tensor::Tensor;

/// Per-parameter gradient buffers in declaration order.
pub type Gradients = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: ConvNetConfig,
    params: Vec<Tensor>,
    geometry: Vec<BlockGeometry>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct BlockGeometry {
    in_channels: usize,
    in_h: usize,
    in_w: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    conv_h: usize,
    conv_w: usize,
    out_h: usize,
    out_w: usize,
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    blocks: Vec<BlockTrace>,
    pub latent: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden_act: Vec<f64>,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone)]
struct BlockTrace {
    pre: Vec<f64>,
    pool_argmax: Vec<usize>,
    out: Vec<f64>,
}

impl ForwardTrace {
    /// Output map of the final conv block, `[channels, h, w]`.
    pub fn final_activation(&self) -> &[f64] {
        &self.blocks.last().expect("at least one block").out
    }

    /// True when both passes took the same branch at every ReLU and every
    /// max-pool window, so the loss is smooth between them.
    pub fn same_activation_pattern(&self, other: &ForwardTrace) -> bool {
        let signs = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (*x > 0.0) == (*y > 0.0));
        self.blocks.len() == other.blocks.len()
            && self
                .blocks
                .iter()
                .zip(&other.blocks)
                .all(|(a, b)| a.pool_argmax == b.pool_argmax && signs(&a.pre, &b.pre))
            && signs(&self.hidden_pre, &other.hidden_pre)
    }
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl Network {
    /// Builds a network with He-normal kernels and zero biases. Weights are
    /// rounded to `f32` so a checkpoint round trip is lossless.
    pub fn init(config: &ConvNetConfig) -> Result<Self> {
        let geometry = config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::new();
        for g in &geometry {
            let fan_in = g.in_channels * g.kernel * g.kernel;
            params.push(he_normal(
                &[g.out_channels, g.in_channels, g.kernel, g.kernel],
                fan_in,
                &mut rng,
            ));
            params.push(Tensor::zeros(&[g.out_channels]));
        }
        let latent_dim = geometry.last().expect("validated").out_channels;
        let mut head_in = latent_dim;
        if let Some(hidden) = config.hidden {
            params.push(he_normal(&[hidden, head_in], head_in, &mut rng));
            params.push(Tensor::zeros(&[hidden]));
            head_in = hidden;
        }
        let std = (1.0 / head_in as f64).sqrt();
        params.push(normal(&[config.num_classes, head_in], std, &mut rng));
        params.push(Tensor::zeros(&[config.num_classes]));
        Ok(Self {
            config: config.clone(),
            params,
            geometry,
        })
    }

    /// Rebuilds a network from flat weights in declaration order.
    pub fn from_weights(config: &ConvNetConfig, weights: &[f64]) -> Result<Self> {
        let mut net = Self::init(config)?;
        let total = net.num_parameters();
        if weights.len() != total {
            return Err(Error::shape(
                format!("{total} weights"),
                format!("{} weights", weights.len()),
            ));
        }
        let mut offset = 0;
        for p in &mut net.params {
            let n = p.numel();
            p.values_mut().copy_from_slice(&weights[offset..offset + n]);
            offset += n;
        }
        Ok(net)
    }

    pub fn config(&self) -> &ConvNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn flat_weights(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.values().iter().copied())
            .collect()
    }

    pub fn latent_dim(&self) -> usize {
        self.geometry.last().expect("validated").out_channels
    }

    /// `(channels, h, w)` of the final block output.
    pub fn final_map_shape(&self) -> (usize, usize, usize) {
        let g = self.geometry.last().expect("validated");
        (g.out_channels, g.out_h, g.out_w)
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn check_input(&self, image: &Image) -> Result<()> {
        let size = self.config.input_size;
        if image.height() != size || image.width() != size {
            return Err(Error::shape(
                format!("{size}x{size} input"),
                format!("{}x{}", image.height(), image.width()),
            ));
        }
        Ok(())
    }

    fn hidden_index(&self) -> Option<usize> {
        self.config.hidden.map(|_| 2 * self.geometry.len())
    }

    fn output_index(&self) -> usize {
        2 * self.geometry.len() + if self.config.hidden.is_some() { 2 } else { 0 }
    }

    pub fn forward(&self, image: &Image) -> ForwardTrace {
        let mut blocks: Vec<BlockTrace> = Vec::with_capacity(self.geometry.len());
        for (b, g) in self.geometry.iter().enumerate() {
            let input = if b == 0 {
                image.data()
            } else {
                &blocks[b - 1].out
            };
            let weight = self.params[2 * b].values();
            let bias = self.params[2 * b + 1].values();
            let pre = conv_forward(g, input, weight, bias);
            let act: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
            let (out, pool_argmax) = match self.config.pooling {
                Pooling::Max2 => max_pool(g, &act),
                Pooling::None => (act, Vec::new()),
            };
            blocks.push(BlockTrace {
                pre,
                pool_argmax,
                out,
            });
        }

        let last = self.geometry.last().expect("validated");
        let plane = last.out_h * last.out_w;
        let final_map = &blocks.last().expect("validated").out;
        let latent: Vec<f64> = final_map
            .chunks_exact(plane)
            .map(|ch| ch.iter().sum::<f64>() / plane as f64)
            .collect();

        let (hidden_pre, hidden_act) = match self.hidden_index() {
            Some(h) => {
                let pre = linear(self.params[h].values(), self.params[h + 1].values(), &latent);
                let act = pre.iter().map(|&v| v.max(0.0)).collect();
                (pre, act)
            }
            None => (Vec::new(), Vec::new()),
        };
        let head_input = if self.config.hidden.is_some() {
            &hidden_act
        } else {
            &latent
        };
        let o = self.output_index();
        let logits = linear(self.params[o].values(), self.params[o + 1].values(), head_input);
        ForwardTrace {
            blocks,
            latent,
            hidden_pre,
            hidden_act,
            logits,
        }
    }

    pub fn logits(&self, image: &Image) -> Vec<f64> {
        self.forward(image).logits
    }

    /// Backpropagates `dlogits` through the head to the latent vector,
    /// accumulating head parameter gradients into `grads` when given.
    fn head_backward(
        &self,
        trace: &ForwardTrace,
        dlogits: &[f64],
        mut grads: Option<&mut Gradients>,
    ) -> Vec<f64> {
        let o = self.output_index();
        let head_input = if self.config.hidden.is_some() {
            &trace.hidden_act
        } else {
            &trace.latent
        };
        if let Some(g) = grads.as_deref_mut() {
            let (gw, rest) = g[o..].split_at_mut(1);
            accumulate_linear(&mut gw[0], &mut rest[0], dlogits, head_input);
        }
        let dhead = linear_backward_input(self.params[o].values(), dlogits, head_input.len());
        match self.hidden_index() {
            Some(h) => {
                let dpre: Vec<f64> = dhead
                    .iter()
                    .zip(&trace.hidden_pre)
                    .map(|(&d, &p)| if p > 0.0 { d } else { 0.0 })
                    .collect();
                if let Some(g) = grads {
                    let (gw, rest) = g[h..].split_at_mut(1);
                    accumulate_linear(&mut gw[0], &mut rest[0], &dpre, &trace.latent);
                }
                linear_backward_input(self.params[h].values(), &dpre, trace.latent.len())
            }
            None => dhead,
        }
    }

    /// Gradient of `Σ dlogits · logits` with respect to the final block
    /// output map.
    pub fn final_activation_gradient(&self, trace: &ForwardTrace, dlogits: &[f64]) -> Vec<f64> {
        let dlatent = self.head_backward(trace, dlogits, None);
        let (_, h, w) = self.final_map_shape();
        gap_backward(&dlatent, h * w)
    }

    /// Accumulates parameter gradients of `Σ dlogits · logits` into `grads`.
    pub fn backward(&self, image: &Image, trace: &ForwardTrace, dlogits: &[f64], grads: &mut Gradients) {
        let dlatent = self.head_backward(trace, dlogits, Some(grads));
        let last = self.geometry.last().expect("validated");
        let mut dout = gap_backward(&dlatent, last.out_h * last.out_w);

        for b in (0..self.geometry.len()).rev() {
            let g = &self.geometry[b];
            let bt = &trace.blocks[b];
            let mut dpre = match self.config.pooling {
                Pooling::Max2 => {
                    let mut d = vec![0.0; bt.pre.len()];
                    for (&idx, &v) in bt.pool_argmax.iter().zip(&dout) {
                        d[idx] += v;
                    }
                    d
                }
                Pooling::None => dout,
            };
            for (d, &p) in dpre.iter_mut().zip(&bt.pre) {
                if p <= 0.0 {
                    *d = 0.0;
                }
            }
            let input = if b == 0 {
                image.data()
            } else {
                &trace.blocks[b - 1].out
            };
            let (gw, gb) = grads[2 * b..2 * b + 2].split_at_mut(1);
            conv_backward_params(g, input, &dpre, &mut gw[0], &mut gb[0]);
            dout = if b > 0 {
                conv_backward_input(g, self.params[2 * b].values(), &dpre)
            } else {
                Vec::new()
            };
        }
    }

    pub fn zero_gradients(&self) -> Gradients {
        self.params.iter().map(|p| vec![0.0; p.numel()]).collect()
    }

    /// Mean cross-entropy over `batch` and its exact gradient, with the loss
    /// multiplied by `loss_scale`.
    pub fn loss_and_gradients(&self, batch: &[(&Image, usize)], loss_scale: f64) -> (f64, Gradients) {
        let n = batch.len().max(1) as f64;
        let mut grads = self.zero_gradients();
        let mut total = 0.0;
        for &(image, label) in batch {
            let trace = self.forward(image);
            let (loss, mut dlogits) = cross_entropy(&trace.logits, label);
            total += loss;
            for d in &mut dlogits {
                *d *= loss_scale / n;
            }
            self.backward(image, &trace, &dlogits, &mut grads);
        }
        (loss_scale * total / n, grads)
    }

    pub fn mean_loss(&self, batch: &[(&Image, usize)]) -> f64 {
        let n = batch.len().max(1) as f64;
        batch
            .iter()
            .map(|&(img, label)| cross_entropy(&self.forward(img).logits, label).0)
            .sum::<f64>()
            / n
    }

    /// Plain SGD-with-momentum update; weights stay `f32`-representable.
    pub(crate) fn apply_update(&mut self, velocity: &mut Gradients, grads: &Gradients, config: &TrainConfig) {
        let lr = config.learning_rate;
        for ((p, v), g) in self.params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
            for ((w, v), &g) in p.values_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *v = config.momentum * *v + g;
                *w = round_f32(*w - lr * *v);
            }
        }
    }

    /// Copies `grads` into the parameters' gradient buffers.
    pub fn store_gradients(&mut self, grads: Gradients) -> Result<()> {
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.set_grad(g)?;
        }
        Ok(())
    }
}

impl ConvNetConfig {
    fn validate(&self) -> Result<Vec<BlockGeometry>> {
        if self.blocks.is_empty() {
            return Err(Error::invalid("blocks", "at least one conv block is required"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes", "need at least 2 classes"));
        }
        if self.hidden == Some(0) {
            return Err(Error::invalid("hidden", "hidden width must be positive"));
        }
        let mut in_channels = CHANNELS;
        let mut h = self.input_size;
        let mut w = self.input_size;
        let mut out = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            if b.channels == 0 || b.kernel == 0 || b.stride == 0 {
                return Err(Error::invalid(
                    "blocks",
                    format!("block {i}: channels, kernel and stride must be positive"),
                ));
            }
            let padding = b.kernel / 2;
            if h + 2 * padding < b.kernel || w + 2 * padding < b.kernel {
                return Err(Error::invalid(
                    "blocks",
                    format!("block {i}: {h}x{w} input is smaller than the kernel"),
                ));
            }
            let conv_h = (h + 2 * padding - b.kernel) / b.stride + 1;
            let conv_w = (w + 2 * padding - b.kernel) / b.stride + 1;
            let (out_h, out_w) = match self.pooling {
                Pooling::Max2 => (conv_h / 2, conv_w / 2),
                Pooling::None => (conv_h, conv_w),
            };
            if out_h == 0 || out_w == 0 {
                return Err(Error::invalid(
                    "blocks",
                    format!("block {i}: spatial size collapses to zero"),
                ));
            }
            out.push(BlockGeometry {
                in_channels,
                in_h: h,
                in_w: w,
                out_channels: b.channels,
                kernel: b.kernel,
                stride: b.stride,
                padding,
                conv_h,
                conv_w,
                out_h,
                out_w,
            });
            in_channels = b.channels;
            h = out_h;
            w = out_w;
        }
        Ok(out)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of `logits` against `label` and its gradient w.r.t. the
/// logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
    let loss = log_sum - logits[label];
    let mut grad: Vec<f64> = logits.iter().map(|&z| (z - log_sum).exp()).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let values = (0..n).map(|_| round_f32(dist.sample(rng))).collect();
    Tensor::from_vec(shape, values).expect("length matches shape")
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    normal(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

fn linear(weight: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    bias.iter()
        .enumerate()
        .map(|(o, &b)| {
            let row = &weight[o * x.len()..(o + 1) * x.len()];
            b + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>()
        })
        .collect()
}

fn accumulate_linear(gw: &mut [f64], gb: &mut [f64], dout: &[f64], x: &[f64]) {
    for (o, &d) in dout.iter().enumerate() {
        gb[o] += d;
        for (g, &xi) in gw[o * x.len()..(o + 1) * x.len()].iter_mut().zip(x) {
            *g += d * xi;
        }
    }
}

fn linear_backward_input(weight: &[f64], dout: &[f64], in_dim: usize) -> Vec<f64> {
    let mut dx = vec![0.0; in_dim];
    for (o, &d) in dout.iter().enumerate() {
        for (dxi, &w) in dx.iter_mut().zip(&weight[o * in_dim..(o + 1) * in_dim]) {
            *dxi += d * w;
        }
    }
    dx
}

fn gap_backward(dlatent: &[f64], plane: usize) -> Vec<f64> {
    dlatent
        .iter()
        .flat_map(|&d| std::iter::repeat_n(d / plane as f64, plane))
        .collect()
}

/// Valid output index range along one axis for kernel offset `k`.
fn valid_range(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    // need 0 <= o * stride + k - pad < in_len
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if in_len + pad > k {
        ((in_len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn conv_forward(g: &BlockGeometry, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.conv_h, g.conv_w);
    let mut out = vec![0.0; g.out_channels * oh * ow];
    let k = g.kernel;
    for o in 0..g.out_channels {
        let out_plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        out_plane.fill(bias[o]);
        for c in 0..g.in_channels {
            let in_plane = &input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
            for ky in 0..k {
                let (y0, y1) = valid_range(ky, g.padding, g.stride, g.in_h, oh);
                for kx in 0..k {
                    let w = weight[((o * g.in_channels + c) * k + ky) * k + kx];
                    let (x0, x1) = valid_range(kx, g.padding, g.stride, g.in_w, ow);
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.padding;
                        let in_row = &in_plane[iy * g.in_w..(iy + 1) * g.in_w];
                        let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                        if g.stride == 1 {
                            let ix0 = x0 + kx - g.padding;
                            for (dst, &src) in out_row[x0..x1].iter_mut().zip(&in_row[ix0..]) {
                                *dst += w * src;
                            }
                        } else {
                            for ox in x0..x1 {
                                out_row[ox] += w * in_row[ox * g.stride + kx - g.padding];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward_params(g: &BlockGeometry, input: &[f64], dpre: &[f64], gw: &mut [f64], gb: &mut [f64]) {
    let (oh, ow) = (g.conv_h, g.conv_w);
    let k = g.kernel;
    for o in 0..g.out_channels {
        let d_plane = &dpre[o * oh * ow..(o + 1) * oh * ow];
        gb[o] += d_plane.iter().sum::<f64>();
        for c in 0..g.in_channels {
            let in_plane = &input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
            for ky in 0..k {
                let (y0, y1) = valid_range(ky, g.padding, g.stride, g.in_h, oh);
                for kx in 0..k {
                    let (x0, x1) = valid_range(kx, g.padding, g.stride, g.in_w, ow);
                    let mut acc = 0.0;
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.padding;
                        let in_row = &in_plane[iy * g.in_w..(iy + 1) * g.in_w];
                        let d_row = &d_plane[oy * ow..(oy + 1) * ow];
                        for ox in x0..x1 {
                            acc += d_row[ox] * in_row[ox * g.stride + kx - g.padding];
                        }
                    }
                    gw[((o * g.in_channels + c) * k + ky) * k + kx] += acc;
                }
            }
        }
    }
}

fn conv_backward_input(g: &BlockGeometry, weight: &[f64], dpre: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.conv_h, g.conv_w);
    let k = g.kernel;
    let mut din = vec![0.0; g.in_channels * g.in_h * g.in_w];
    for o in 0..g.out_channels {
        let d_plane = &dpre[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..g.in_channels {
            let din_plane = &mut din[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
            for ky in 0..k {
                let (y0, y1) = valid_range(ky, g.padding, g.stride, g.in_h, oh);
                for kx in 0..k {
                    let w = weight[((o * g.in_channels + c) * k + ky) * k + kx];
                    let (x0, x1) = valid_range(kx, g.padding, g.stride, g.in_w, ow);
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.padding;
                        let d_row = &d_plane[oy * ow..(oy + 1) * ow];
                        for ox in x0..x1 {
                            din_plane[iy * g.in_w + ox * g.stride + kx - g.padding] += w * d_row[ox];
                        }
                    }
                }
            }
        }
    }
    din
}

/// 2x2 max-pool with stride 2; ties resolve to the first element in scan
/// order. Returns pooled values and the flat source index of each.
fn max_pool(g: &BlockGeometry, act: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let (h, w) = (g.conv_h, g.conv_w);
    let (oh, ow) = (g.out_h, g.out_w);
    let mut out = Vec::with_capacity(g.out_channels * oh * ow);
    let mut idx = Vec::with_capacity(g.out_channels * oh * ow);
    for c in 0..g.out_channels {
        let base = c * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if act[j] > act[best] {
                        best = j;
                    }
                }
                out.push(act[best]);
                idx.push(best);
            }
        }
    }
    (out, idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::ConvBlock;

    fn tiny_config(pooling: Pooling, hidden: Option<usize>) -> ConvNetConfig {
        ConvNetConfig {
            input_size: 8,
            blocks: vec![ConvBlock::new(3, 3, 1), ConvBlock::new(4, 3, 1)],
            pooling,
            hidden,
            num_classes: 3,
            seed: 1,
        }
    }

    #[test]
    fn valid_range_matches_brute_force() {
        for k in 0usize..5 {
            for pad in 0usize..3 {
                for stride in 1..4 {
                    for in_len in 1..9 {
                        let out_len = (in_len + 2 * pad).saturating_sub(k) / stride + 1;
                        let brute: Vec<usize> = (0..out_len)
                            .filter(|&o| {
                                let i = (o * stride + k) as isize - pad as isize;
                                i >= 0 && (i as usize) < in_len
                            })
                            .collect();
                        let (lo, hi) = valid_range(k, pad, stride, in_len, out_len);
                        assert_eq!((lo..hi).collect::<Vec<_>>(), brute, "k{k} p{pad} s{stride} n{in_len}");
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0, -3.0, 2.5]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let (loss, _) = cross_entropy(&[0.1, 0.2, 0.3], 1);
        assert!(loss > 0.0);
    }

    #[test]
    fn strided_and_unpooled_shapes() {
        let mut cfg = tiny_config(Pooling::None, None);
        cfg.blocks[0].stride = 2;
        let net = Network::init(&cfg).unwrap();
        assert_eq!(net.final_map_shape(), (4, 4, 4));
        let img = Image::filled(8, 8, [0.3, 0.5, 0.7]);
        assert_eq!(net.logits(&img).len(), 3);
    }

    #[test]
    fn conv_matches_naive_definition() {
        let cfg = ConvNetConfig {
            input_size: 5,
            blocks: vec![ConvBlock::new(2, 3, 2)],
            pooling: Pooling::None,
            hidden: None,
            num_classes: 2,
            seed: 9,
        };
        let geometry = cfg.validate().unwrap();
        let g = geometry[0];
        let input: Vec<f64> = (0..3 * 25).map(|i| ((i * 7) % 11) as f64 / 10.0).collect();
        let weight: Vec<f64> = (0..2 * 3 * 9).map(|i| ((i * 5) % 7) as f64 / 7.0 - 0.4).collect();
        let bias = vec![0.1, -0.2];
        let fast = conv_forward(&g, &input, &weight, &bias);
        for o in 0..2 {
            for oy in 0..g.conv_h {
                for ox in 0..g.conv_w {
                    let mut acc = bias[o];
                    for c in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    acc += weight[((o * 3 + c) * 3 + ky) * 3 + kx]
                                        * input[c * 25 + iy as usize * 5 + ix as usize];
                                }
                            }
                        }
                    }
                    let got = fast[(o * g.conv_h + oy) * g.conv_w + ox];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn weights_round_trip_through_flat_vector() {
        let cfg = tiny_config(Pooling::Max2, Some(5));
        let net = Network::init(&cfg).unwrap();
        let back = Network::from_weights(&cfg, &net.flat_weights()).unwrap();
        assert_eq!(net, back);
        assert!(Network::from_weights(&cfg, &[0.0; 3]).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny_config(Pooling::Max2, None);
        cfg.blocks.clear();
        assert!(Network::init(&cfg).is_err());
        let mut cfg = tiny_config(Pooling::Max2, None);
        cfg.input_size = 3;
        assert!(Network::init(&cfg).is_err());
    }
}
