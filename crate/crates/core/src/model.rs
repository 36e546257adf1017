//! Convolutional VAE over `C x 32 x 32` tiles.
//!
//! The encoder is a stack of downsampling stages, each a stride-2 3x3
//! convolution followed by batch norm and leaky ReLU, optionally followed by
//! `extra_depth` stride-1 blocks wrapped in a skip connection. A fully
//! connected layer maps the flattened bottleneck to the latent mean and
//! log-variance. The decoder mirrors it with nearest-neighbour upsampling
//! followed by a convolution at every scale, then a final convolution back
//! to the input bands and a logistic squash.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    batchnorm, batchnorm_backward, conv2d, conv2d_backward, leaky_relu, leaky_relu_backward, linear,
    linear_backward, sigmoid, sigmoid_backward, upsample_nearest2x, upsample_nearest2x_backward,
    update_running_stats, BatchNormCache, BatchStats, LayerKind, LayerParams, NormMode, ParamGrads,
};
use crate::tensor::{Scalar, Tensor};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

/// Slack allowed around `[0, 1]` when validating encoder input.
pub const INPUT_RANGE_SLACK: f32 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub tile_size: usize,
    pub hidden_channels: Vec<usize>,
    pub extra_depth: usize,
    pub latent_dim: usize,
    pub leaky_slope: f64,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
    /// KL weight of the training loss.
    pub beta: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::small()
    }
}

impl ModelConfig {
    fn with_channels(hidden_channels: Vec<usize>, extra_depth: usize) -> Self {
        Self {
            in_channels: 10,
            tile_size: 32,
            hidden_channels,
            extra_depth,
            latent_dim: 128,
            leaky_slope: 0.01,
            bn_epsilon: 1e-5,
            bn_momentum: 0.1,
            beta: 1.0,
        }
    }

    pub fn small() -> Self {
        Self::with_channels(vec![16, 32, 64], 0)
    }

    pub fn medium() -> Self {
        Self::with_channels(vec![32, 64, 128], 0)
    }

    pub fn large() -> Self {
        Self::with_channels(vec![32, 64, 128], 2)
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "small" => Some(Self::small()),
            "medium" => Some(Self::medium()),
            "large" => Some(Self::large()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.hidden_channels.is_empty() || self.hidden_channels.contains(&0) {
            return fail("hidden_channels must be a non-empty list of positive widths".into());
        }
        if self.latent_dim == 0 || self.in_channels == 0 {
            return fail("latent_dim and in_channels must be at least 1".into());
        }
        let scale = 1usize.checked_shl(self.hidden_channels.len() as u32).unwrap_or(0);
        if scale == 0 || self.tile_size == 0 || self.tile_size % scale != 0 {
            return fail(format!(
                "tile_size {} is not divisible by 2^{}",
                self.tile_size,
                self.hidden_channels.len()
            ));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return fail(format!("leaky_slope {} outside (0, 1)", self.leaky_slope));
        }
        if !(self.bn_epsilon > 0.0) || !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return fail("bn_epsilon must be positive and bn_momentum in (0, 1]".into());
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return fail(format!("beta {} must be finite and non-negative", self.beta));
        }
        Ok(())
    }

    pub fn bottleneck_size(&self) -> usize {
        self.tile_size >> self.hidden_channels.len()
    }

    fn decoder_channels(&self) -> Vec<usize> {
        let h = &self.hidden_channels;
        (0..h.len()).map(|s| h[(h.len() as isize - 2 - s as isize).max(0) as usize]).collect()
    }
}

/// Trainable parameter counts as `(encoder, total)`, in closed form.
pub fn count_parameters(config: &ModelConfig) -> Result<(usize, usize)> {
    config.validate()?;
    let conv = |o: usize, i: usize| o * i * 9 + o;
    let bn = |c: usize| 2 * c;
    let block = |o: usize, i: usize| conv(o, i) + bn(o);
    let residual = |c: usize| config.extra_depth * block(c, c);
    let bottleneck = config.bottleneck_size();
    let last = *config.hidden_channels.last().expect("validated non-empty");
    let flat = last * bottleneck * bottleneck;

    let mut encoder = 0;
    let mut prev = config.in_channels;
    for &c in &config.hidden_channels {
        encoder += block(c, prev) + residual(c);
        prev = c;
    }
    encoder += flat * 2 * config.latent_dim + 2 * config.latent_dim;

    let mut decoder = config.latent_dim * flat + flat;
    let mut prev = last;
    for c in config.decoder_channels() {
        decoder += block(c, prev) + residual(c);
        prev = c;
    }
    decoder += conv(config.in_channels, prev);
    Ok((encoder, encoder + decoder))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub mu: Vec<f32>,
    pub log_var: Vec<f32>,
}

impl LatentCode {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu.len() != self.log_var.len() {
            return Err(Error::dim("latent code", self.mu.len(), self.log_var.len()));
        }
        if self.mu.iter().chain(&self.log_var).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "latent code" });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Block {
    conv: usize,
    bn: usize,
}

#[derive(Clone, Debug)]
struct Stage {
    main: Block,
    residual: Vec<Block>,
}

#[derive(Clone, Debug)]
struct Plan {
    encoder: Vec<Stage>,
    enc_fc: usize,
    dec_fc: usize,
    decoder: Vec<Stage>,
    out_conv: usize,
}

/// A VAE at element precision `T`: configuration plus the ordered layer
/// list (encoder layers first, then decoder layers).
#[derive(Clone, Debug)]
pub struct Vae<T = f32> {
    config: ModelConfig,
    layers: Vec<LayerParams<T>>,
    plan: Plan,
}

impl<T> PartialEq for Vae<T>
where
    LayerParams<T>: PartialEq,
{
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.layers == other.layers
    }
}

fn layout<T: Scalar>(config: &ModelConfig) -> (Vec<LayerParams<T>>, Plan) {
    let mut layers = Vec::new();
    let mut push = |p: LayerParams<T>| {
        layers.push(p);
        layers.len() - 1
    };
    let (eps, mom) = (config.bn_epsilon, config.bn_momentum);
    let block = |prefix: &str, out: usize, inp: usize, push: &mut dyn FnMut(LayerParams<T>) -> usize| Block {
        conv: push(LayerParams::conv(format!("{prefix}.conv"), out, inp)),
        bn: push(LayerParams::batchnorm(format!("{prefix}.bn"), out, eps, mom)),
    };
    let stage = |prefix: String, out: usize, inp: usize, push: &mut dyn FnMut(LayerParams<T>) -> usize| {
        let main = block(&prefix, out, inp, push);
        let residual = (0..config.extra_depth)
            .map(|j| block(&format!("{prefix}.res{j}"), out, out, push))
            .collect();
        Stage { main, residual }
    };

    let mut encoder = Vec::new();
    let mut prev = config.in_channels;
    for (s, &c) in config.hidden_channels.iter().enumerate() {
        encoder.push(stage(format!("enc.down{s}"), c, prev, &mut push));
        prev = c;
    }
    let b = config.bottleneck_size();
    let flat = prev * b * b;
    let n = config.latent_dim;
    let enc_fc = push(LayerParams::linear("enc.fc", 2 * n, flat));
    let dec_fc = push(LayerParams::linear("dec.fc", flat, n));
    let mut decoder = Vec::new();
    for (s, c) in config.decoder_channels().into_iter().enumerate() {
        decoder.push(stage(format!("dec.up{s}"), c, prev, &mut push));
        prev = c;
    }
    let out_conv = push(LayerParams::conv("dec.out", config.in_channels, prev));
    (
        layers,
        Plan {
            encoder,
            enc_fc,
            dec_fc,
            decoder,
            out_conv,
        },
    )
}

#[derive(Clone, Debug)]
struct BlockCache<T> {
    input: Tensor<T>,
    norm: BatchNormCache<T>,
    pre_act: Tensor<T>,
}

#[derive(Clone, Debug)]
struct StageCache<T> {
    /// Shape of the stage input before upsampling (decoder stages only).
    upsampled: bool,
    main: BlockCache<T>,
    residual: Vec<BlockCache<T>>,
}

#[derive(Clone, Debug)]
pub struct EncoderCache<T> {
    stages: Vec<StageCache<T>>,
    fc_input: Tensor<T>,
    /// Raw log-variance before clamping, for the clamp's gradient mask.
    raw_log_var: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct DecoderCache<T> {
    z: Tensor<T>,
    fc_pre: Tensor<T>,
    stages: Vec<StageCache<T>>,
    out_input: Tensor<T>,
    output: Tensor<T>,
}

/// Batch-norm statistics gathered during a training forward pass.
pub type NormUpdates<T> = Vec<(usize, BatchStats<T>)>;

/// Encoder output for a batch: rows of `mu` and clamped `log_var`.
#[derive(Clone, Debug)]
pub struct Posterior<T> {
    pub mu: Vec<T>,
    pub log_var: Vec<T>,
    pub batch: usize,
    pub dim: usize,
}

impl<T: Scalar> Posterior<T> {
    pub fn code(&self, n: usize) -> LatentCode {
        let r = n * self.dim..(n + 1) * self.dim;
        LatentCode {
            mu: self.mu[r.clone()].iter().map(|v| v.as_f64() as f32).collect(),
            log_var: self.log_var[r].iter().map(|v| v.as_f64() as f32).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossTerms {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Deliberate faults for negative-control gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    None,
    /// Negates the weight gradient of every convolution.
    ConvSignFlip,
    /// Drops the mean-correction terms of the training-mode batch-norm
    /// input gradient.
    BatchNormNaive,
}

/// Everything produced by one forward/backward pass over a batch.
pub struct StepOutput<T> {
    pub loss: LossTerms,
    pub grads: Vec<ParamGrads<T>>,
    pub norm_updates: NormUpdates<T>,
    pub posterior: Posterior<T>,
}

impl<T: Scalar> Vae<T> {
    /// Layer skeleton with zero conv/linear weights and identity batch norms.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layers, plan) = layout(&config);
        Ok(Self { config, layers, plan })
    }

    /// Kaiming fan-in initialisation from a seeded ChaCha8 stream; biases
    /// start at zero.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut vae = Self::zeroed(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slope = vae.config.leaky_slope;
        let gain = (2.0 / (1.0 + slope * slope)).sqrt();
        for layer in &mut vae.layers {
            let fan_in = match layer.kind {
                LayerKind::BatchNorm => continue,
                _ => layer.weights.item_len(),
            };
            let std = match (layer.kind, layer.name.as_str()) {
                (_, "dec.out") | (LayerKind::Linear, _) => (1.0 / fan_in as f64).sqrt(),
                _ => gain / (fan_in as f64).sqrt(),
            };
            let dist = Normal::new(0.0, std).expect("finite std");
            for w in layer.weights.data_mut() {
                *w = T::lit(dist.sample(&mut rng));
            }
        }
        Ok(vae)
    }

    /// Adopts a layer list, checking every shape against `config`.
    pub fn from_layers(config: ModelConfig, layers: Vec<LayerParams<T>>) -> Result<Self> {
        let template = Self::zeroed(config)?;
        if layers.len() != template.layers.len() {
            return Err(Error::Malformed(format!(
                "expected {} layers, found {}",
                template.layers.len(),
                layers.len()
            )));
        }
        for (expected, found) in template.layers.iter().zip(&layers) {
            let shape_err = |e: Vec<usize>, f: Vec<usize>| Error::LayerShape {
                layer: expected.name.clone(),
                expected: e,
                found: f,
            };
            if expected.kind != found.kind {
                return Err(Error::Malformed(format!("layer `{}` has the wrong kind", expected.name)));
            }
            if expected.weights.shape() != found.weights.shape() {
                return Err(shape_err(expected.weights.shape().to_vec(), found.weights.shape().to_vec()));
            }
            if expected.bias.len() != found.bias.len() {
                return Err(shape_err(vec![expected.bias.len()], vec![found.bias.len()]));
            }
            if let Some(norm) = &found.norm {
                if let Some(r) = &norm.running {
                    if r.var.iter().any(|v| !(*v > T::zero())) {
                        return Err(Error::Validation(format!(
                            "layer `{}`: running variance must be strictly positive",
                            expected.name
                        )));
                    }
                }
            }
        }
        Ok(Self {
            config: template.config,
            layers,
            plan: template.plan,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerParams<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams<T>] {
        &mut self.layers
    }

    /// Index of the last encoder layer; decoder layers follow it.
    pub fn encoder_layer_count(&self) -> usize {
        self.plan.enc_fc + 1
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(LayerParams::parameter_count).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Vae<U> {
        Vae {
            config: self.config.clone(),
            layers: self.layers.iter().map(LayerParams::cast).collect(),
            plan: self.plan.clone(),
        }
    }

    pub fn apply_norm_updates(&mut self, updates: &NormUpdates<T>) {
        for (idx, stats) in updates {
            update_running_stats(&mut self.layers[*idx], stats);
        }
    }

    fn block_forward(
        &self,
        b: Block,
        input: Tensor<T>,
        stride: usize,
        mode: NormMode,
        updates: &mut NormUpdates<T>,
    ) -> Result<(Tensor<T>, BlockCache<T>)> {
        let conv_out = conv2d(&input, &self.layers[b.conv], stride, 1)?;
        let (pre_act, norm, stats) = batchnorm(&conv_out, &self.layers[b.bn], mode)?;
        if let Some(stats) = stats {
            updates.push((b.bn, stats));
        }
        let out = leaky_relu(&pre_act, self.config.leaky_slope)?;
        Ok((out, BlockCache { input, norm, pre_act }))
    }

    fn block_backward(
        &self,
        b: Block,
        grad: &Tensor<T>,
        cache: &BlockCache<T>,
        stride: usize,
        grads: &mut [ParamGrads<T>],
        fault: BackwardFault,
    ) -> Result<Tensor<T>> {
        let g = leaky_relu_backward(grad, &cache.pre_act, self.config.leaky_slope)?;
        let (g, bn_grads) = if fault == BackwardFault::BatchNormNaive && cache.norm.mode == NormMode::Train {
            let mut naive = cache.norm.clone();
            naive.mode = NormMode::Infer;
            batchnorm_backward(&g, &naive, &self.layers[b.bn])?
        } else {
            batchnorm_backward(&g, &cache.norm, &self.layers[b.bn])?
        };
        accumulate(&mut grads[b.bn], &bn_grads);
        let (g, mut conv_grads) = conv2d_backward(&g, &cache.input, &self.layers[b.conv], stride, 1)?;
        if fault == BackwardFault::ConvSignFlip {
            conv_grads.weights = conv_grads.weights.map(|v| -v);
        }
        accumulate(&mut grads[b.conv], &conv_grads);
        Ok(g)
    }

    fn stage_forward(
        &self,
        stage: &Stage,
        input: Tensor<T>,
        upsample: bool,
        mode: NormMode,
        updates: &mut NormUpdates<T>,
    ) -> Result<(Tensor<T>, StageCache<T>)> {
        let (input, stride) = if upsample {
            (upsample_nearest2x(&input), 1)
        } else {
            (input, 2)
        };
        let (main_out, main) = self.block_forward(stage.main, input, stride, mode, updates)?;
        let mut residual = Vec::with_capacity(stage.residual.len());
        let out = if stage.residual.is_empty() {
            main_out
        } else {
            let mut h = main_out.clone();
            for &b in &stage.residual {
                let (next, cache) = self.block_forward(b, h, 1, mode, updates)?;
                residual.push(cache);
                h = next;
            }
            h.add_assign(&main_out);
            h
        };
        Ok((
            out,
            StageCache {
                upsampled: upsample,
                main,
                residual,
            },
        ))
    }

    fn stage_backward(
        &self,
        stage: &Stage,
        grad: Tensor<T>,
        cache: &StageCache<T>,
        grads: &mut [ParamGrads<T>],
        fault: BackwardFault,
    ) -> Result<Tensor<T>> {
        let mut g_main = grad.clone();
        if !stage.residual.is_empty() {
            let mut g = grad;
            for (&b, c) in stage.residual.iter().zip(&cache.residual).rev() {
                g = self.block_backward(b, &g, c, 1, grads, fault)?;
            }
            g_main.add_assign(&g);
        }
        let stride = if cache.upsampled { 1 } else { 2 };
        let g = self.block_backward(stage.main, &g_main, &cache.main, stride, grads, fault)?;
        if cache.upsampled {
            upsample_nearest2x_backward(&g)
        } else {
            Ok(g)
        }
    }

    fn check_tiles(&self, tiles: &Tensor<T>) -> Result<()> {
        let c = &self.config;
        let expected = [tiles.batch(), c.in_channels, c.tile_size, c.tile_size];
        if tiles.shape() != expected || tiles.batch() == 0 {
            return Err(Error::dim("encode input", expected, tiles.shape()));
        }
        Ok(())
    }

    pub fn encode_forward(
        &self,
        tiles: &Tensor<T>,
        mode: NormMode,
        updates: &mut NormUpdates<T>,
    ) -> Result<(Posterior<T>, EncoderCache<T>)> {
        self.check_tiles(tiles)?;
        let mut h = tiles.clone();
        let mut stages = Vec::with_capacity(self.plan.encoder.len());
        for stage in &self.plan.encoder {
            let (next, cache) = self.stage_forward(stage, h, false, mode, updates)?;
            stages.push(cache);
            h = next;
        }
        let out = linear(&h, &self.layers[self.plan.enc_fc])?;
        let n = self.config.latent_dim;
        let batch = tiles.batch();
        let mut mu = Vec::with_capacity(batch * n);
        let mut raw_log_var = Vec::with_capacity(batch * n);
        for i in 0..batch {
            let row = out.item(i);
            mu.extend_from_slice(&row[..n]);
            raw_log_var.extend_from_slice(&row[n..]);
        }
        let (lo, hi) = (T::lit(LOG_VAR_MIN), T::lit(LOG_VAR_MAX));
        let log_var = raw_log_var.iter().map(|&v| v.max(lo).min(hi)).collect();
        Ok((
            Posterior {
                mu,
                log_var,
                batch,
                dim: n,
            },
            EncoderCache {
                stages,
                fc_input: h,
                raw_log_var,
            },
        ))
    }

    /// Backpropagates gradients with respect to the clamped posterior.
    pub fn encode_backward(
        &self,
        grad_mu: &[T],
        grad_log_var: &[T],
        cache: &EncoderCache<T>,
        grads: &mut [ParamGrads<T>],
        fault: BackwardFault,
    ) -> Result<Tensor<T>> {
        let n = self.config.latent_dim;
        let batch = cache.fc_input.batch();
        let (lo, hi) = (T::lit(LOG_VAR_MIN), T::lit(LOG_VAR_MAX));
        let mut g_out = Tensor::zeros([batch, 2 * n, 1, 1]);
        for i in 0..batch {
            let row = g_out.item_mut(i);
            row[..n].copy_from_slice(&grad_mu[i * n..(i + 1) * n]);
            for j in 0..n {
                let raw = cache.raw_log_var[i * n + j];
                row[n + j] = if raw > lo && raw < hi {
                    grad_log_var[i * n + j]
                } else {
                    T::zero()
                };
            }
        }
        let (mut g, fc_grads) = linear_backward(&g_out, &cache.fc_input, &self.layers[self.plan.enc_fc])?;
        accumulate(&mut grads[self.plan.enc_fc], &fc_grads);
        for (stage, c) in self.plan.encoder.iter().zip(&cache.stages).rev() {
            g = self.stage_backward(stage, g, c, grads, fault)?;
        }
        Ok(g)
    }

    /// Decodes a batch of latent vectors laid out as `(batch, n, 1, 1)`.
    pub fn decode_forward(
        &self,
        z: &Tensor<T>,
        mode: NormMode,
        updates: &mut NormUpdates<T>,
    ) -> Result<(Tensor<T>, DecoderCache<T>)> {
        if z.item_len() != self.config.latent_dim {
            return Err(Error::dim("decode input", self.config.latent_dim, z.item_len()));
        }
        let fc_pre = linear(z, &self.layers[self.plan.dec_fc])?;
        let b = self.config.bottleneck_size();
        let last = *self.config.hidden_channels.last().expect("validated");
        let mut h = leaky_relu(&fc_pre, self.config.leaky_slope)?.reshape([z.batch(), last, b, b])?;
        let mut stages = Vec::with_capacity(self.plan.decoder.len());
        for stage in &self.plan.decoder {
            let (next, cache) = self.stage_forward(stage, h, true, mode, updates)?;
            stages.push(cache);
            h = next;
        }
        let logits = conv2d(&h, &self.layers[self.plan.out_conv], 1, 1)?;
        let output = sigmoid(&logits)?;
        Ok((
            output.clone(),
            DecoderCache {
                z: z.clone(),
                fc_pre,
                stages,
                out_input: h,
                output,
            },
        ))
    }

    pub fn decode_backward(
        &self,
        grad_output: &Tensor<T>,
        cache: &DecoderCache<T>,
        grads: &mut [ParamGrads<T>],
        fault: BackwardFault,
    ) -> Result<Tensor<T>> {
        let g = sigmoid_backward(grad_output, &cache.output);
        let (mut g, mut out_grads) = conv2d_backward(&g, &cache.out_input, &self.layers[self.plan.out_conv], 1, 1)?;
        if fault == BackwardFault::ConvSignFlip {
            out_grads.weights = out_grads.weights.map(|v| -v);
        }
        accumulate(&mut grads[self.plan.out_conv], &out_grads);
        for (stage, c) in self.plan.decoder.iter().zip(&cache.stages).rev() {
            g = self.stage_backward(stage, g, c, grads, fault)?;
        }
        let g = g.reshape(cache.fc_pre.shape())?;
        let g = leaky_relu_backward(&g, &cache.fc_pre, self.config.leaky_slope)?;
        let (gz, fc_grads) = linear_backward(&g, &cache.z, &self.layers[self.plan.dec_fc])?;
        accumulate(&mut grads[self.plan.dec_fc], &fc_grads);
        Ok(gz)
    }

    pub fn zero_grads(&self) -> Vec<ParamGrads<T>> {
        self.layers.iter().map(ParamGrads::zeros_like).collect()
    }

    /// Forward and backward pass of the batch-mean ELBO loss with the
    /// given standard-normal noise (`batch * n` values).
    pub fn loss_and_grads(
        &self,
        tiles: &Tensor<T>,
        noise: &[T],
        mode: NormMode,
        fault: BackwardFault,
    ) -> Result<StepOutput<T>> {
        let mut updates = Vec::new();
        let (post, enc_cache) = self.encode_forward(tiles, mode, &mut updates)?;
        let (batch, n) = (post.batch, post.dim);
        if noise.len() != batch * n {
            return Err(Error::dim("reparameterisation noise", batch * n, noise.len()));
        }
        let half = T::lit(0.5);
        let sigma: Vec<T> = post.log_var.iter().map(|&lv| (half * lv).exp()).collect();
        let z: Vec<T> = (0..batch * n).map(|i| post.mu[i] + sigma[i] * noise[i]).collect();
        let z = Tensor::from_vec([batch, n, 1, 1], z)?;
        let (recon, dec_cache) = self.decode_forward(&z, mode, &mut updates)?;

        let beta = T::lit(self.config.beta);
        let inv_batch = T::one() / T::lit(batch as f64);
        let mut grad_recon = Tensor::zeros(recon.shape());
        for ((g, &r), &x) in grad_recon.data_mut().iter_mut().zip(recon.data()).zip(tiles.data()) {
            *g = T::lit(2.0) * (r - x) * inv_batch;
        }
        let recon_sum = squared_error(recon.data(), tiles.data());
        let kl_sum = kl_to_standard_normal(&post.mu, &post.log_var);
        let recon_mean = recon_sum * inv_batch;
        let kl_mean = kl_sum * inv_batch;
        let total = recon_mean + beta * kl_mean;
        if !total.is_finite() {
            return Err(Error::NonFinite { op: "elbo loss" });
        }

        let mut grads = self.zero_grads();
        let gz = self.decode_backward(&grad_recon, &dec_cache, &mut grads, fault)?;
        let mut grad_mu = vec![T::zero(); batch * n];
        let mut grad_lv = vec![T::zero(); batch * n];
        for i in 0..batch * n {
            let g = gz.data()[i];
            let e = post.log_var[i].exp();
            grad_mu[i] = g + beta * post.mu[i] * inv_batch;
            grad_lv[i] = g * half * sigma[i] * noise[i] + beta * half * (e - T::one()) * inv_batch;
        }
        self.encode_backward(&grad_mu, &grad_lv, &enc_cache, &mut grads, fault)?;
        Ok(StepOutput {
            loss: LossTerms {
                total: total.as_f64(),
                recon: recon_mean.as_f64(),
                kl: kl_mean.as_f64(),
            },
            grads,
            norm_updates: updates,
            posterior: post,
        })
    }

    /// Loss only, same conventions as [`Vae::loss_and_grads`].
    pub fn loss(&self, tiles: &Tensor<T>, noise: &[T], mode: NormMode) -> Result<LossTerms> {
        let mut updates = Vec::new();
        let (post, _) = self.encode_forward(tiles, mode, &mut updates)?;
        let n = post.dim;
        let z: Vec<T> = (0..post.batch * n)
            .map(|i| post.mu[i] + (T::lit(0.5) * post.log_var[i]).exp() * noise[i])
            .collect();
        let z = Tensor::from_vec([post.batch, n, 1, 1], z)?;
        let (recon, _) = self.decode_forward(&z, mode, &mut updates)?;
        let batch = T::lit(post.batch as f64);
        let recon_sum = squared_error(recon.data(), tiles.data());
        let kl = kl_to_standard_normal(&post.mu, &post.log_var) / batch;
        let recon_mean = recon_sum / batch;
        Ok(LossTerms {
            total: (recon_mean + T::lit(self.config.beta) * kl).as_f64(),
            recon: recon_mean.as_f64(),
            kl: kl.as_f64(),
        })
    }
}

impl Vae<f32> {
    fn check_range(tile: &Tensor<f32>) -> Result<()> {
        let lo = -INPUT_RANGE_SLACK;
        let hi = 1.0 + INPUT_RANGE_SLACK;
        if let Some(v) = tile.data().iter().find(|v| !(**v >= lo && **v <= hi)) {
            return Err(Error::Validation(format!("tile value {v} outside the normalised range [0, 1]")));
        }
        Ok(())
    }

    /// Inference-mode encoding of a `(1, C, S, S)` tile.
    pub fn encode(&self, tile: &Tensor<f32>) -> Result<LatentCode> {
        if tile.batch() != 1 {
            return Err(Error::dim("encode batch", 1, tile.batch()));
        }
        Ok(self.encode_batch(tile)?.remove(0))
    }

    /// Inference-mode encoding of every item in a batch.
    pub fn encode_batch(&self, tiles: &Tensor<f32>) -> Result<Vec<LatentCode>> {
        Self::check_range(tiles)?;
        let (post, _) = self.encode_forward(tiles, NormMode::Infer, &mut Vec::new())?;
        Ok((0..post.batch).map(|i| post.code(i)).collect())
    }

    pub fn decode(&self, z: &[f32], mode: NormMode) -> Result<Tensor<f32>> {
        let z = Tensor::from_vec([1, z.len(), 1, 1], z.to_vec())?;
        let mut updates = Vec::new();
        Ok(self.decode_forward(&z, mode, &mut updates)?.0)
    }
}

fn accumulate<T: Scalar>(into: &mut ParamGrads<T>, from: &ParamGrads<T>) {
    into.weights.add_assign(&from.weights);
    for (a, &b) in into.bias.iter_mut().zip(&from.bias) {
        *a = *a + b;
    }
}

/// Neumaier summation.
fn compensated_sum<T: Scalar>(values: impl Iterator<Item = T>) -> T {
    let (mut sum, mut carry) = (T::zero(), T::zero());
    for v in values {
        let t = sum + v;
        carry = carry + if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + carry
}

fn squared_error<T: Scalar>(a: &[T], b: &[T]) -> T {
    compensated_sum(a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)))
}

fn kl_to_standard_normal<T: Scalar>(mu: &[T], log_var: &[T]) -> T {
    let half = T::lit(0.5);
    -half * compensated_sum(mu.iter().zip(log_var).map(|(&m, &lv)| T::one() + lv - m * m - lv.exp()))
}

/// `z = mu + exp(log_var / 2) * eps` with `eps ~ N(0, I)` drawn from `rng`.
pub fn reparameterize<R: rand::Rng + ?Sized>(code: &LatentCode, rng: &mut R) -> Vec<f32> {
    code.mu
        .iter()
        .zip(&code.log_var)
        .map(|(&m, &lv)| {
            let eps: f64 = StandardNormal.sample(rng);
            m + (0.5 * lv).exp() * eps as f32
        })
        .collect()
}

/// Single-tile ELBO terms: summed squared error, KL to the unit Gaussian
/// prior, and `recon + beta * kl`.
pub fn elbo_loss(tile: &Tensor<f32>, reconstruction: &Tensor<f32>, code: &LatentCode, beta: f64) -> Result<LossTerms> {
    if tile.shape() != reconstruction.shape() {
        return Err(Error::dim("elbo_loss", tile.shape(), reconstruction.shape()));
    }
    code.validate()?;
    let recon = compensated_sum(
        tile.data()
            .iter()
            .zip(reconstruction.data())
            .map(|(&x, &r)| (x as f64 - r as f64).powi(2)),
    );
    let mu: Vec<f64> = code.mu.iter().map(|&v| v as f64).collect();
    let lv: Vec<f64> = code.log_var.iter().map(|&v| v as f64).collect();
    let kl = kl_to_standard_normal(&mu, &lv);
    let total = recon + beta * kl;
    if !total.is_finite() {
        return Err(Error::NonFinite { op: "elbo_loss" });
    }
    Ok(LossTerms { total, recon, kl })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: usize, b: f64) -> f64 {
        (a as f64 / 1e6 - b).abs() / b
    }

    #[test]
    fn preset_counts_track_published_sizes() {
        for (cfg, enc, total) in [
            (ModelConfig::small(), 0.285, 0.443),
            (ModelConfig::medium(), 0.617, 0.979),
            (ModelConfig::large(), 1.005, 1.500),
        ] {
            let (e, t) = count_parameters(&cfg).unwrap();
            assert!(rel(e, enc) < 0.015, "encoder {e} vs {enc}");
            assert!(rel(t, total) < 0.015, "total {t} vs {total}");
        }
    }

    #[test]
    fn count_matches_built_layers() {
        for cfg in [ModelConfig::small(), ModelConfig::large()] {
            let vae = Vae::<f32>::zeroed(cfg.clone()).unwrap();
            let (enc, total) = count_parameters(&cfg).unwrap();
            assert_eq!(vae.parameter_count(), total);
            let enc_built: usize = vae.layers()[..vae.encoder_layer_count()]
                .iter()
                .map(LayerParams::parameter_count)
                .sum();
            assert_eq!(enc_built, enc);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ModelConfig::small();
        cfg.tile_size = 36;
        assert!(matches!(count_parameters(&cfg), Err(Error::InvalidConfig(_))));
        let mut cfg = ModelConfig::small();
        cfg.hidden_channels.clear();
        assert!(Vae::<f32>::build(cfg, 0).is_err());
        let mut cfg = ModelConfig::small();
        cfg.latent_dim = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let a = Vae::<f32>::build(ModelConfig::small(), 7).unwrap();
        let b = Vae::<f32>::build(ModelConfig::small(), 7).unwrap();
        let c = Vae::<f32>::build(ModelConfig::small(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn encode_shapes_and_range_validation() {
        let vae = Vae::<f32>::build(ModelConfig::small(), 1).unwrap();
        let tile = Tensor::filled([1, 10, 32, 32], 0.5);
        let code = vae.encode(&tile).unwrap();
        assert_eq!(code.mu.len(), 128);
        assert_eq!(code.log_var.len(), 128);
        assert_eq!(code, vae.encode(&tile).unwrap());
        assert!(code.log_var.iter().all(|v| (-10.0..=10.0).contains(v)));

        let bad = Tensor::filled([1, 10, 32, 32], 1.5);
        assert!(matches!(vae.encode(&bad), Err(Error::Validation(_))));
        let wrong = Tensor::filled([1, 9, 32, 32], 0.5);
        assert!(matches!(vae.encode(&wrong), Err(Error::Dimension { .. })));
    }

    #[test]
    fn decode_zero_latent_is_bounded() {
        let vae = Vae::<f32>::build(ModelConfig::small(), 3).unwrap();
        let out = vae.decode(&[0.0; 128], NormMode::Infer).unwrap();
        assert_eq!(out.shape(), [1, 10, 32, 32]);
        assert!(out.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        assert!(vae.decode(&[0.0; 12], NormMode::Infer).is_err());
    }

    #[test]
    fn elbo_hand_cases() {
        let tile = Tensor::filled([1, 2, 4, 4], 0.25);
        let zero = LatentCode {
            mu: vec![0.0; 3],
            log_var: vec![0.0; 3],
        };
        let l = elbo_loss(&tile, &tile, &zero, 1.0).unwrap();
        assert_eq!((l.total, l.recon, l.kl), (0.0, 0.0, 0.0));
        let shifted = LatentCode {
            mu: vec![1.0, 0.0, 0.0],
            log_var: vec![0.0; 3],
        };
        assert!((elbo_loss(&tile, &tile, &shifted, 1.0).unwrap().kl - 0.5).abs() < 1e-12);
        let other = Tensor::filled([1, 2, 4, 4], 0.75);
        let l = elbo_loss(&tile, &other, &shifted, 2.0).unwrap();
        assert!((l.recon - 32.0 * 0.25).abs() < 1e-12);
        assert!((l.total - (8.0 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn reparameterize_is_seeded_and_vanishes_at_min_log_var() {
        let code = LatentCode {
            mu: vec![0.5, -1.0, 2.0],
            log_var: vec![LOG_VAR_MIN as f32; 3],
        };
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let z1 = reparameterize(&code, &mut r1);
        assert_eq!(z1, reparameterize(&code, &mut r2));
        for (z, m) in z1.iter().zip(&code.mu) {
            assert!((z - m).abs() < (-5.0f32).exp() * 5.0);
        }
    }

    #[test]
    fn loss_and_grads_agrees_with_loss() {
        let vae = Vae::<f64>::build(ModelConfig::small(), 2).unwrap();
        let tiles = Tensor::filled([2, 10, 32, 32], 0.3);
        let noise = vec![0.1; 2 * 128];
        let step = vae.loss_and_grads(&tiles, &noise, NormMode::Train, BackwardFault::None).unwrap();
        let loss = vae.loss(&tiles, &noise, NormMode::Train).unwrap();
        assert!((step.loss.total - loss.total).abs() < 1e-9 * loss.total.abs());
        assert!(step.loss.kl >= 0.0);
        assert_eq!(step.norm_updates.len(), 6);
    }
}
