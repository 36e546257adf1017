//! The five layer primitives of the network, each with a hand-written
//! backward pass: 3x3 convolution, leaky ReLU, batch normalisation,
//! nearest-neighbour 2x upsampling and the fully connected layer. The
//! logistic squash used at the decoder output lives here as well.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    Linear,
    BatchNorm,
}

impl LayerKind {
    pub(crate) fn code(self) -> u8 {
        match self {
            LayerKind::Conv => 0,
            LayerKind::Linear => 1,
            LayerKind::BatchNorm => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(LayerKind::Conv),
            1 => Some(LayerKind::Linear),
            2 => Some(LayerKind::BatchNorm),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub epsilon: f64,
    pub momentum: f64,
    /// `None` until the layer has seen a training batch or been loaded.
    pub running: Option<RunningStats<T>>,
}

/// Parameters of one layer.
///
/// Conv weights are `(out, in, 3, 3)`, linear weights `(out, in, 1, 1)` and
/// batch-norm weights hold the per-channel scale as `(1, C, 1, 1)` with the
/// shift in `bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T = f32> {
    pub name: String,
    pub kind: LayerKind,
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
    pub norm: Option<BatchNormState<T>>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn conv(name: impl Into<String>, out_ch: usize, in_ch: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Conv,
            weights: Tensor::zeros([out_ch, in_ch, KERNEL, KERNEL]),
            bias: vec![T::zero(); out_ch],
            norm: None,
        }
    }

    pub fn linear(name: impl Into<String>, out_features: usize, in_features: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Linear,
            weights: Tensor::zeros([out_features, in_features, 1, 1]),
            bias: vec![T::zero(); out_features],
            norm: None,
        }
    }

    /// Batch norm with unit scale, zero shift and running statistics
    /// initialised to mean 0 / variance 1.
    pub fn batchnorm(name: impl Into<String>, channels: usize, epsilon: f64, momentum: f64) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::BatchNorm,
            weights: Tensor::filled([1, channels, 1, 1], T::one()),
            bias: vec![T::zero(); channels],
            norm: Some(BatchNormState {
                epsilon,
                momentum,
                running: Some(RunningStats {
                    mean: vec![T::zero(); channels],
                    var: vec![T::one(); channels],
                }),
            }),
        }
    }

    /// Trainable element count (running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn out_channels(&self) -> usize {
        match self.kind {
            LayerKind::BatchNorm => self.weights.channels(),
            _ => self.weights.batch(),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weights.channels()
    }

    pub fn cast<U: Scalar>(&self) -> LayerParams<U> {
        let cast_vec = |v: &[T]| v.iter().map(|x| U::lit(x.as_f64())).collect::<Vec<U>>();
        LayerParams {
            name: self.name.clone(),
            kind: self.kind,
            weights: self.weights.cast(),
            bias: cast_vec(&self.bias),
            norm: self.norm.as_ref().map(|n| BatchNormState {
                epsilon: n.epsilon,
                momentum: n.momentum,
                running: n.running.as_ref().map(|r| RunningStats {
                    mean: cast_vec(&r.mean),
                    var: cast_vec(&r.var),
                }),
            }),
        }
    }
}

/// Gradients with respect to one layer's trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<T> {
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn zeros_like(params: &LayerParams<T>) -> Self {
        Self {
            weights: Tensor::zeros(params.weights.shape()),
            bias: vec![T::zero(); params.bias.len()],
        }
    }
}

// ---------------------------------------------------------------------------
// Convolution

fn conv_out_dim(input: usize, stride: usize, pad: usize) -> Option<usize> {
    (input + 2 * pad).checked_sub(KERNEL).map(|v| v / stride + 1)
}

fn check_conv(input: &Tensor<impl Scalar>, params: &LayerParams<impl Scalar>, stride: usize, pad: usize) -> Result<(usize, usize)> {
    if params.kind != LayerKind::Conv {
        return Err(Error::Validation(format!("layer `{}` is not a convolution", params.name)));
    }
    if !(1..=2).contains(&stride) || pad > 1 {
        return Err(Error::Validation(format!(
            "conv2d: stride must be 1 or 2 and pad 0 or 1, got stride {stride} pad {pad}"
        )));
    }
    let [_, in_ch, kh, kw] = params.weights.shape();
    if (kh, kw) != (KERNEL, KERNEL) {
        return Err(Error::dim("conv2d kernel", (KERNEL, KERNEL), (kh, kw)));
    }
    if input.channels() != in_ch {
        return Err(Error::dim("conv2d input channels", in_ch, input.channels()));
    }
    match (
        conv_out_dim(input.height(), stride, pad),
        conv_out_dim(input.width(), stride, pad),
    ) {
        (Some(h), Some(w)) => Ok((h, w)),
        _ => Err(Error::dim("conv2d spatial", "at least 3 after padding", (input.height(), input.width()))),
    }
}

/// Unfolds one `(C, H, W)` item into a `(C*9, out_h*out_w)` column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    item: &[T],
    channels: usize,
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    pad: usize,
    cols: &mut [T],
) {
    let plane = out_h * out_w;
    for c in 0..channels {
        let src = &item[c * height * width..(c + 1) * height * width];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut cols[((c * KERNEL + ky) * KERNEL + kx) * plane..][..plane];
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * out_w..(oy + 1) * out_w];
                    if iy < 0 || iy >= height as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * width..(iy as usize + 1) * width];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= width as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the item.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    channels: usize,
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    pad: usize,
    item: &mut [T],
) {
    let plane = out_h * out_w;
    for c in 0..channels {
        let dst = &mut item[c * height * width..(c + 1) * height * width];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &cols[((c * KERNEL + ky) * KERNEL + kx) * plane..][..plane];
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * width..(iy as usize + 1) * width];
                    for ox in 0..out_w {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < width as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + row[oy * out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 3x3 convolution with zero padding.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, params: &LayerParams<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let (out_h, out_w) = check_conv(input, params, stride, pad)?;
    let [batch, in_ch, height, width] = input.shape();
    let out_ch = params.weights.batch();
    let k = in_ch * KERNEL * KERNEL;
    let plane = out_h * out_w;
    let mut out = Tensor::zeros([batch, out_ch, out_h, out_w]);
    let mut cols = vec![T::zero(); k * plane];
    for n in 0..batch {
        im2col(input.item(n), in_ch, height, width, out_h, out_w, stride, pad, &mut cols);
        let dst = out.item_mut(n);
        for (o, &b) in params.bias.iter().enumerate() {
            dst[o * plane..(o + 1) * plane].fill(b);
        }
        T::gemm(
            out_ch,
            k,
            plane,
            T::one(),
            (params.weights.data(), k as isize, 1),
            (&cols, plane as isize, 1),
            T::one(),
            (dst, plane as isize, 1),
        );
    }
    out.ensure_finite("conv2d")
}

/// Returns `(grad_input, grad_params)` for [`conv2d`].
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    params: &LayerParams<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, ParamGrads<T>)> {
    let (out_h, out_w) = check_conv(input, params, stride, pad)?;
    let [batch, in_ch, height, width] = input.shape();
    let out_ch = params.weights.batch();
    let expected = [batch, out_ch, out_h, out_w];
    if grad_out.shape() != expected {
        return Err(Error::dim("conv2d_backward grad_out", expected, grad_out.shape()));
    }
    let k = in_ch * KERNEL * KERNEL;
    let plane = out_h * out_w;
    let mut grads = ParamGrads::zeros_like(params);
    let mut grad_in = Tensor::zeros(input.shape());
    let mut cols = vec![T::zero(); k * plane];
    let mut grad_cols = vec![T::zero(); k * plane];
    for n in 0..batch {
        let g = grad_out.item(n);
        im2col(input.item(n), in_ch, height, width, out_h, out_w, stride, pad, &mut cols);
        // dW += G (out x P) * cols^T (P x K)
        T::gemm(
            out_ch,
            plane,
            k,
            T::one(),
            (g, plane as isize, 1),
            (&cols, 1, plane as isize),
            T::one(),
            (grads.weights.data_mut(), k as isize, 1),
        );
        for (o, gb) in grads.bias.iter_mut().enumerate() {
            *gb = *gb + g[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
        }
        // dcols = W^T (K x out) * G (out x P)
        T::gemm(
            k,
            out_ch,
            plane,
            T::one(),
            (params.weights.data(), 1, k as isize),
            (g, plane as isize, 1),
            T::zero(),
            (&mut grad_cols, plane as isize, 1),
        );
        col2im(&grad_cols, in_ch, height, width, out_h, out_w, stride, pad, grad_in.item_mut(n));
    }
    Ok((grad_in.ensure_finite("conv2d_backward")?, grads))
}

// ---------------------------------------------------------------------------
// Activations

pub fn leaky_relu<T: Scalar>(input: &Tensor<T>, negative_slope: f64) -> Result<Tensor<T>> {
    if !input.is_finite() {
        return Err(Error::NonFinite { op: "leaky_relu" });
    }
    let slope = T::lit(negative_slope);
    Ok(input.map(|x| if x >= T::zero() { x } else { slope * x }))
}

/// Backward of [`leaky_relu`] given the forward input.
pub fn leaky_relu_backward<T: Scalar>(grad_out: &Tensor<T>, input: &Tensor<T>, negative_slope: f64) -> Result<Tensor<T>> {
    if grad_out.shape() != input.shape() {
        return Err(Error::dim("leaky_relu_backward", input.shape(), grad_out.shape()));
    }
    let slope = T::lit(negative_slope);
    let data = grad_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x >= T::zero() { g } else { g * slope })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    input.map(|x| T::one() / (T::one() + (-x).exp())).ensure_finite("sigmoid")
}

/// Backward of [`sigmoid`] expressed through its output.
pub fn sigmoid_backward<T: Scalar>(grad_out: &Tensor<T>, output: &Tensor<T>) -> Tensor<T> {
    let data = grad_out
        .data()
        .iter()
        .zip(output.data())
        .map(|(&g, &y)| g * y * (T::one() - y))
        .collect();
    Tensor::from_vec(output.shape(), data).expect("shapes checked by caller")
}

// ---------------------------------------------------------------------------
// Batch normalisation

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Infer,
}

/// Values kept from the forward pass for [`batchnorm_backward`].
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mode: NormMode,
}

/// Per-channel statistics of a training batch; fed to
/// [`update_running_stats`] once the step is committed.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased sample variance.
    pub var: Vec<T>,
}

fn norm_state<T>(params: &LayerParams<T>) -> Result<&BatchNormState<T>> {
    match (&params.kind, &params.norm) {
        (LayerKind::BatchNorm, Some(state)) => Ok(state),
        _ => Err(Error::Validation(format!("layer `{}` is not a batch norm", params.name))),
    }
}

pub fn batchnorm<T: Scalar>(
    input: &Tensor<T>,
    params: &LayerParams<T>,
    mode: NormMode,
) -> Result<(Tensor<T>, BatchNormCache<T>, Option<BatchStats<T>>)> {
    let state = norm_state(params)?;
    let [batch, channels, h, w] = input.shape();
    if channels != params.weights.channels() {
        return Err(Error::dim("batchnorm channels", params.weights.channels(), channels));
    }
    let plane = h * w;
    let count = batch * plane;
    let eps = T::lit(state.epsilon);
    let scale = params.weights.data();
    let mut normalized = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    let mut inv_std = vec![T::zero(); channels];

    let (means, vars, stats) = match mode {
        NormMode::Train => {
            if count < 2 {
                return Err(Error::Validation(format!(
                    "batchnorm `{}`: training needs at least 2 values per channel, got {count}",
                    params.name
                )));
            }
            let total = T::lit(count as f64);
            let mut means = vec![T::zero(); channels];
            let mut vars = vec![T::zero(); channels];
            for c in 0..channels {
                let mut sum = T::zero();
                for n in 0..batch {
                    sum = sum + input.item(n)[c * plane..(c + 1) * plane].iter().copied().sum::<T>();
                }
                let mean = sum / total;
                let mut sq = T::zero();
                for n in 0..batch {
                    for &x in &input.item(n)[c * plane..(c + 1) * plane] {
                        sq = sq + (x - mean) * (x - mean);
                    }
                }
                means[c] = mean;
                vars[c] = sq / total;
            }
            let unbiased = T::lit(count as f64 / (count as f64 - 1.0));
            let stats = BatchStats {
                mean: means.clone(),
                var: vars.iter().map(|&v| v * unbiased).collect(),
            };
            (means, vars, Some(stats))
        }
        NormMode::Infer => {
            let running = state.running.as_ref().ok_or_else(|| {
                Error::Validation(format!("batchnorm `{}`: running statistics are uninitialised", params.name))
            })?;
            (running.mean.clone(), running.var.clone(), None)
        }
    };

    for c in 0..channels {
        inv_std[c] = T::one() / (vars[c] + eps).sqrt();
    }
    for n in 0..batch {
        let src = input.item(n);
        let xn = normalized.item_mut(n);
        for c in 0..channels {
            for i in c * plane..(c + 1) * plane {
                xn[i] = (src[i] - means[c]) * inv_std[c];
            }
        }
        let dst = out.item_mut(n);
        for c in 0..channels {
            for i in c * plane..(c + 1) * plane {
                dst[i] = scale[c] * normalized.item(n)[i] + params.bias[c];
            }
        }
    }
    let out = out.ensure_finite("batchnorm")?;
    Ok((out, BatchNormCache { normalized, inv_std, mode }, stats))
}

pub fn batchnorm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &BatchNormCache<T>,
    params: &LayerParams<T>,
) -> Result<(Tensor<T>, ParamGrads<T>)> {
    if grad_out.shape() != cache.normalized.shape() {
        return Err(Error::dim("batchnorm_backward", cache.normalized.shape(), grad_out.shape()));
    }
    let [batch, channels, h, w] = grad_out.shape();
    let plane = h * w;
    let count = T::lit((batch * plane) as f64);
    let scale = params.weights.data();
    let mut grads = ParamGrads::zeros_like(params);
    for c in 0..channels {
        let mut dscale = T::zero();
        let mut dshift = T::zero();
        for n in 0..batch {
            let g = &grad_out.item(n)[c * plane..(c + 1) * plane];
            let xn = &cache.normalized.item(n)[c * plane..(c + 1) * plane];
            for (&gi, &xi) in g.iter().zip(xn) {
                dscale = dscale + gi * xi;
                dshift = dshift + gi;
            }
        }
        grads.weights.data_mut()[c] = dscale;
        grads.bias[c] = dshift;
    }
    let mut grad_in = Tensor::zeros(grad_out.shape());
    for n in 0..batch {
        let g = grad_out.item(n);
        let xn = cache.normalized.item(n);
        let dst = grad_in.item_mut(n);
        for c in 0..channels {
            let k = scale[c] * cache.inv_std[c];
            for i in c * plane..(c + 1) * plane {
                dst[i] = match cache.mode {
                    NormMode::Infer => k * g[i],
                    NormMode::Train => {
                        k / count * (count * g[i] - grads.bias[c] - xn[i] * grads.weights.data()[c])
                    }
                };
            }
        }
    }
    Ok((grad_in.ensure_finite("batchnorm_backward")?, grads))
}

/// Momentum update of the running statistics from a committed training batch.
pub fn update_running_stats<T: Scalar>(params: &mut LayerParams<T>, stats: &BatchStats<T>) {
    let Some(state) = params.norm.as_mut() else {
        return;
    };
    let m = T::lit(state.momentum);
    match state.running.as_mut() {
        Some(running) => {
            for (r, &b) in running.mean.iter_mut().zip(&stats.mean) {
                *r = (T::one() - m) * *r + m * b;
            }
            for (r, &b) in running.var.iter_mut().zip(&stats.var) {
                *r = (T::one() - m) * *r + m * b;
            }
        }
        None => {
            state.running = Some(RunningStats {
                mean: stats.mean.clone(),
                var: stats.var.clone(),
            });
        }
    }
}

// ---------------------------------------------------------------------------
// Upsampling

pub fn upsample_nearest2x<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let [batch, channels, h, w] = input.shape();
    let mut out = Tensor::zeros([batch, channels, 2 * h, 2 * w]);
    let ow = 2 * w;
    for n in 0..batch {
        let src = input.item(n);
        let dst = out.item_mut(n);
        for c in 0..channels {
            for y in 0..h {
                let src_row = &src[(c * h + y) * w..(c * h + y + 1) * w];
                let base = (c * 2 * h + 2 * y) * ow;
                for (x, &v) in src_row.iter().enumerate() {
                    dst[base + 2 * x] = v;
                    dst[base + 2 * x + 1] = v;
                    dst[base + ow + 2 * x] = v;
                    dst[base + ow + 2 * x + 1] = v;
                }
            }
        }
    }
    out
}

/// Sums each 2x2 block of the incoming gradient.
pub fn upsample_nearest2x_backward<T: Scalar>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let [batch, channels, oh, ow] = grad_out.shape();
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(Error::dim("upsample_backward", "even spatial dims", (oh, ow)));
    }
    let (h, w) = (oh / 2, ow / 2);
    let mut out = Tensor::zeros([batch, channels, h, w]);
    for n in 0..batch {
        let src = grad_out.item(n);
        let dst = out.item_mut(n);
        for c in 0..channels {
            for y in 0..h {
                let base = (c * oh + 2 * y) * ow;
                for x in 0..w {
                    dst[(c * h + y) * w + x] =
                        src[base + 2 * x] + src[base + 2 * x + 1] + src[base + ow + 2 * x] + src[base + ow + 2 * x + 1];
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Fully connected

fn check_linear(input: &Tensor<impl Scalar>, params: &LayerParams<impl Scalar>) -> Result<(usize, usize)> {
    if params.kind != LayerKind::Linear {
        return Err(Error::Validation(format!("layer `{}` is not a linear layer", params.name)));
    }
    let out_f = params.weights.batch();
    let in_f = params.weights.channels();
    if input.item_len() != in_f {
        return Err(Error::dim("linear input", in_f, input.item_len()));
    }
    Ok((in_f, out_f))
}

/// Affine map `W x + b` applied to each flattened batch item; the result has
/// shape `(batch, out, 1, 1)`.
pub fn linear<T: Scalar>(input: &Tensor<T>, params: &LayerParams<T>) -> Result<Tensor<T>> {
    let (in_f, out_f) = check_linear(input, params)?;
    let batch = input.batch();
    let mut out = Tensor::zeros([batch, out_f, 1, 1]);
    for n in 0..batch {
        out.item_mut(n).copy_from_slice(&params.bias);
    }
    T::gemm(
        batch,
        in_f,
        out_f,
        T::one(),
        (input.data(), in_f as isize, 1),
        (params.weights.data(), 1, in_f as isize),
        T::one(),
        (out.data_mut(), out_f as isize, 1),
    );
    out.ensure_finite("linear")
}

pub fn linear_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    params: &LayerParams<T>,
) -> Result<(Tensor<T>, ParamGrads<T>)> {
    let (in_f, out_f) = check_linear(input, params)?;
    let batch = input.batch();
    if grad_out.len() != batch * out_f {
        return Err(Error::dim("linear_backward grad_out", [batch, out_f], grad_out.shape()));
    }
    let mut grads = ParamGrads::zeros_like(params);
    // dW = G^T (out x N) * X (N x in)
    T::gemm(
        out_f,
        batch,
        in_f,
        T::one(),
        (grad_out.data(), 1, out_f as isize),
        (input.data(), in_f as isize, 1),
        T::zero(),
        (grads.weights.data_mut(), in_f as isize, 1),
    );
    for n in 0..batch {
        for (gb, &g) in grads.bias.iter_mut().zip(grad_out.item(n)) {
            *gb = *gb + g;
        }
    }
    let mut grad_in = Tensor::zeros(input.shape());
    T::gemm(
        batch,
        out_f,
        in_f,
        T::one(),
        (grad_out.data(), out_f as isize, 1),
        (params.weights.data(), in_f as isize, 1),
        T::zero(),
        (grad_in.data_mut(), in_f as isize, 1),
    );
    Ok((grad_in.ensure_finite("linear_backward")?, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_conv(rng: &mut ChaCha8Rng, out_ch: usize, in_ch: usize) -> LayerParams<f64> {
        let mut p = LayerParams::conv("c", out_ch, in_ch);
        for w in p.weights.data_mut() {
            *w = rng.random_range(-1.0..1.0);
        }
        for b in &mut p.bias {
            *b = rng.random_range(-1.0..1.0);
        }
        p
    }

    fn naive_conv(input: &Tensor<f64>, p: &LayerParams<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let [batch, in_ch, h, w] = input.shape();
        let out_ch = p.weights.batch();
        let oh = (h + 2 * pad - 3) / stride + 1;
        let ow = (w + 2 * pad - 3) / stride + 1;
        let mut out = vec![0.0; batch * out_ch * oh * ow];
        for n in 0..batch {
            for o in 0..out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = p.bias[o];
                        for c in 0..in_ch {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += p.weights.at(o, c, ky, kx) * input.at(n, c, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        out[((n * out_ch + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::from_vec([batch, out_ch, oh, ow], out).unwrap()
    }

    #[test]
    fn conv_stride2_halves_tile() {
        let input = Tensor::<f32>::zeros([1, 10, 32, 32]);
        let p = LayerParams::<f32>::conv("c", 16, 10);
        assert_eq!(conv2d(&input, &p, 2, 1).unwrap().shape(), [1, 16, 16, 16]);
    }

    #[test]
    fn three_stride2_convs_reach_4x4() {
        let mut t = Tensor::<f32>::zeros([1, 3, 32, 32]);
        for _ in 0..3 {
            t = conv2d(&t, &LayerParams::conv("c", 3, 3), 2, 1).unwrap();
        }
        assert_eq!(t.shape(), [1, 3, 4, 4]);
    }

    #[test]
    fn centered_delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random_tensor(&mut rng, [1, 1, 6, 5]);
        let mut p = LayerParams::<f64>::conv("delta", 1, 1);
        p.weights.data_mut()[4] = 1.0;
        assert_eq!(conv2d(&input, &p, 1, 1).unwrap(), input);
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 0), (2, 1)] {
            let input = random_tensor(&mut rng, [2, 2, 5, 5]);
            let p = random_conv(&mut rng, 3, 2);
            let fast = conv2d(&input, &p, stride, pad).unwrap();
            let slow = naive_conv(&input, &p, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_bad_stride() {
        let input = Tensor::<f32>::zeros([1, 2, 8, 8]);
        let p = LayerParams::<f32>::conv("c", 4, 3);
        assert!(matches!(conv2d(&input, &p, 1, 1), Err(Error::Dimension { .. })));
        let p = LayerParams::<f32>::conv("c", 4, 2);
        assert!(matches!(conv2d(&input, &p, 3, 1), Err(Error::Validation(_))));
    }

    #[test]
    fn conv_backward_of_zero_grad_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random_tensor(&mut rng, [1, 2, 4, 4]);
        let p = random_conv(&mut rng, 2, 2);
        let g = Tensor::zeros([1, 2, 2, 2]);
        let (gi, gp) = conv2d_backward(&g, &input, &p, 2, 1).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(gp.weights.data().iter().all(|&v| v == 0.0));
        assert!(gp.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_backward_scalar_product_rule() {
        // A 1x1 input with pad 1 only touches the kernel centre.
        let input = Tensor::<f64>::from_vec([1, 1, 1, 1], vec![3.0]).unwrap();
        let mut p = LayerParams::<f64>::conv("c", 1, 1);
        p.weights.data_mut()[4] = 2.0;
        let g = Tensor::from_vec([1, 1, 1, 1], vec![0.5]).unwrap();
        let (gi, gp) = conv2d_backward(&g, &input, &p, 1, 1).unwrap();
        assert_eq!(gp.weights.data()[4], 0.5 * 3.0);
        assert_eq!(gi.data()[0], 0.5 * 2.0);
        assert_eq!(gp.bias[0], 0.5);
    }

    #[test]
    fn conv_backward_checks_grad_shape() {
        let input = Tensor::<f32>::zeros([1, 1, 4, 4]);
        let p = LayerParams::<f32>::conv("c", 1, 1);
        let g = Tensor::zeros([1, 1, 4, 4]);
        assert!(conv2d_backward(&g, &input, &p, 2, 1).is_err());
    }

    #[test]
    fn leaky_relu_definition() {
        let t = Tensor::<f32>::from_vec([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        let out = leaky_relu(&t, 0.01).unwrap();
        assert_eq!(out.data(), &[-0.01, 0.0, 2.0]);
        let pos = Tensor::<f32>::from_vec([1, 1, 1, 2], vec![0.5, 4.0]).unwrap();
        assert_eq!(leaky_relu(&pos, 0.01).unwrap(), pos);
        let bad = Tensor::<f32>::from_vec([1, 1, 1, 1], vec![f32::NAN]).unwrap();
        assert!(leaky_relu(&bad, 0.01).is_err());
    }

    #[test]
    fn batchnorm_infer_with_unit_stats_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = random_tensor(&mut rng, [2, 3, 2, 2]);
        let p = LayerParams::<f64>::batchnorm("bn", 3, 1e-5, 0.1);
        let (out, _, stats) = batchnorm(&input, &p, NormMode::Infer).unwrap();
        assert!(stats.is_none());
        for (a, b) in out.data().iter().zip(input.data()) {
            assert!((a - b).abs() < 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn batchnorm_train_on_constant_input_yields_shift() {
        let input = Tensor::<f64>::filled([2, 2, 3, 3], 7.0);
        let mut p = LayerParams::<f64>::batchnorm("bn", 2, 1e-5, 0.1);
        p.bias = vec![0.25, -1.5];
        p.weights.data_mut().copy_from_slice(&[3.0, 2.0]);
        let (out, _, _) = batchnorm(&input, &p, NormMode::Train).unwrap();
        for n in 0..2 {
            for (c, shift) in [0.25, -1.5].into_iter().enumerate() {
                for y in 0..3 {
                    for x in 0..3 {
                        assert_eq!(out.at(n, c, y, x), shift);
                    }
                }
            }
        }
    }

    #[test]
    fn batchnorm_train_normalises_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = random_tensor(&mut rng, [3, 2, 4, 4]).map(|v| 5.0 * v + 2.0);
        let p = LayerParams::<f64>::batchnorm("bn", 2, 1e-5, 0.1);
        let (out, _, _) = batchnorm(&input, &p, NormMode::Train).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|n| (0..16).map(move |i| (n, i)))
                .map(|(n, i)| out.item(n)[c * 16 + i])
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }
    }

    #[test]
    fn batchnorm_errors() {
        let p = LayerParams::<f64>::batchnorm("bn", 1, 1e-5, 0.1);
        let single = Tensor::<f64>::zeros([1, 1, 1, 1]);
        assert!(batchnorm(&single, &p, NormMode::Train).is_err());
        let mut uninit = p.clone();
        uninit.norm.as_mut().unwrap().running = None;
        assert!(batchnorm(&single, &uninit, NormMode::Infer).is_err());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut p = LayerParams::<f64>::batchnorm("bn", 1, 1e-5, 0.1);
        let input = Tensor::from_vec([1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let (_, _, stats) = batchnorm(&input, &p, NormMode::Train).unwrap();
        update_running_stats(&mut p, &stats.unwrap());
        let running = p.norm.unwrap().running.unwrap();
        assert!((running.mean[0] - 0.2).abs() < 1e-12);
        // unbiased variance of {1, 3} is 2
        assert!((running.var[0] - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn upsample_replicates_blocks() {
        let t = Tensor::<f32>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = upsample_nearest2x(&t);
        assert_eq!(up.shape(), [1, 1, 4, 4]);
        #[rustfmt::skip]
        let expected = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(up.data(), &expected);
        // averaging 2x2 blocks undoes the replication
        let pooled = upsample_nearest2x_backward(&up).unwrap().map(|v| v / 4.0);
        assert_eq!(pooled, t);
    }

    #[test]
    fn upsample_backward_of_ones_is_fours() {
        let g = Tensor::<f32>::filled([1, 2, 4, 6], 1.0);
        let back = upsample_nearest2x_backward(&g).unwrap();
        assert_eq!(back.shape(), [1, 2, 2, 3]);
        assert!(back.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn linear_hand_examples() {
        let mut p = LayerParams::<f64>::linear("fc", 1, 2);
        p.weights.data_mut().copy_from_slice(&[1.0, 2.0]);
        p.bias = vec![3.0];
        let x = Tensor::from_vec([1, 2, 1, 1], vec![1.0, 1.0]).unwrap();
        assert_eq!(linear(&x, &p).unwrap().data(), &[6.0]);

        let mut id = LayerParams::<f64>::linear("id", 3, 3);
        for i in 0..3 {
            id.weights.data_mut()[i * 3 + i] = 1.0;
        }
        let x = Tensor::from_vec([1, 3, 1, 1], vec![0.5, -2.0, 9.0]).unwrap();
        assert_eq!(linear(&x, &id).unwrap().data(), x.data());
        assert_eq!(id.parameter_count(), 12);
        assert_eq!(LayerParams::<f64>::linear("fc", 2, 4).parameter_count(), 10);
    }

    #[test]
    fn linear_rejects_wrong_width() {
        let p = LayerParams::<f64>::linear("fc", 2, 3);
        let x = Tensor::zeros([1, 4, 1, 1]);
        assert!(matches!(linear(&x, &p), Err(Error::Dimension { .. })));
    }

    #[test]
    fn ops_are_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let input = random_tensor(&mut rng, [2, 2, 6, 6]);
        let p = random_conv(&mut rng, 3, 2);
        assert_eq!(conv2d(&input, &p, 2, 1).unwrap(), conv2d(&input, &p, 2, 1).unwrap());
    }
}
