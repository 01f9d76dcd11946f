//! Layers shared by the encoders and extractors.
//!
//! Every sequence tensor is laid out `[batch, time, channels]`, so pointwise
//! convolutions are plain matrix products over the last axis. Strided and
//! transposed convolutions are expressed through framing and overlap-add on
//! top of matmul, which keeps all of them differentiable and fast on CPU.

mod fused;
mod params;

pub use fused::{global_layer_norm, layer_norm, prelu};
pub use params::{Init, ParamScope, ParamStore};

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// Affine map over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(vs: &ParamScope, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        Self::with_init(vs, in_dim, out_dim, bias, Init::fan_in(in_dim))
    }

    pub fn with_init(
        vs: &ParamScope,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        let weight = vs.get((in_dim, out_dim), "weight", init)?;
        let bias = if bias {
            Some(vs.get(out_dim, "bias", Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().ok_or_else(|| Error::Shape("scalar input".into()))?;
        let rows = x.elem_count() / in_dim.max(1);
        let y = x.reshape((rows, in_dim))?.matmul(&self.weight)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        let y = y.reshape(out_dims)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

/// Layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gain: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new(vs: &ParamScope, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: vs.get(dim, "gain", Init::Ones)?,
            bias: vs.get(dim, "bias", Init::Zeros)?,
        })
    }

    pub fn gain(&self) -> &Tensor {
        &self.gain
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.gain, &self.bias, LN_EPS)
    }

    /// Cumulative variant: statistics for frame `t` cover frames `0..=t`.
    pub fn forward_cumulative(&self, x: &Tensor) -> Result<Tensor> {
        cumulative_layer_norm(x, &self.gain, &self.bias)
    }
}

/// Normalization over both time and channels of each batch item.
#[derive(Debug, Clone)]
pub struct GlobalLayerNorm {
    gain: Tensor,
    bias: Tensor,
}

impl GlobalLayerNorm {
    pub fn new(vs: &ParamScope, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: vs.get(dim, "gain", Init::Ones)?,
            bias: vs.get(dim, "bias", Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        global_layer_norm(x, &self.gain, &self.bias, LN_EPS)
    }
}

/// Lower-triangular ones, `tri[t][j] = 1` iff `j <= t`.
fn prefix_matrix(n: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let data: Vec<f32> = (0..n * n)
        .map(|i| if i % n <= i / n { 1.0 } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(data, (n, n), device)?.to_dtype(dtype)?)
}

/// Cumulative layer normalization of `x: [B, T, C]`.
///
/// Row `t` is normalized with the mean and variance of all `C * (t + 1)`
/// entries in rows `0..=t`, then scaled by `gain` and shifted by `bias`.
pub fn cumulative_layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, t, c) = x.dims3()?;
    let tri = prefix_matrix(t, x.dtype(), x.device())?;
    let row_sum = x.sum_keepdim(D::Minus1)?;
    let row_sq = x.sqr()?.sum_keepdim(D::Minus1)?;
    let cum_sum = tri.broadcast_matmul(&row_sum)?;
    let cum_sq = tri.broadcast_matmul(&row_sq)?;
    let counts: Vec<f64> = (1..=t).map(|i| 1.0 / (i * c) as f64).collect();
    let inv_n = Tensor::from_vec(counts, (t, 1), x.device())?.to_dtype(x.dtype())?;
    let mean = cum_sum.broadcast_mul(&inv_n)?;
    let var = (cum_sq.broadcast_mul(&inv_n)? - mean.sqr()?)?.relu()?;
    let y = x
        .broadcast_sub(&mean)?
        .broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
    Ok(y.broadcast_mul(gain)?.broadcast_add(bias)?)
}

/// Running statistics that let [`cumulative_layer_norm`] continue across chunks.
#[derive(Debug, Clone, Default)]
pub struct CumulativeStats {
    count: f64,
    sum: f64,
    sum_sq: f64,
}

impl CumulativeStats {
    /// Normalizes the next rows of a stream, `x: [1, n, C]`.
    pub fn forward(&mut self, x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (_, n, c) = x.dims3()?;
        let sums = x
            .sum_keepdim(D::Minus1)?
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        let sqs = x
            .sqr()?
            .sum_keepdim(D::Minus1)?
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        let mut means = Vec::with_capacity(n);
        let mut stds = Vec::with_capacity(n);
        for (s, q) in sums.iter().zip(&sqs) {
            self.count += c as f64;
            self.sum += s;
            self.sum_sq += q;
            let mean = self.sum / self.count;
            let var = (self.sum_sq / self.count - mean * mean).max(0.0);
            means.push(mean);
            stds.push((var + LN_EPS).sqrt());
        }
        let mean = Tensor::from_vec(means, (1, n, 1), x.device())?.to_dtype(x.dtype())?;
        let std = Tensor::from_vec(stds, (1, n, 1), x.device())?.to_dtype(x.dtype())?;
        let y = x.broadcast_sub(&mean)?.broadcast_div(&std)?;
        Ok(y.broadcast_mul(gain)?.broadcast_add(bias)?)
    }
}

/// Parametric ReLU with one slope per channel.
#[derive(Debug, Clone)]
pub struct PRelu {
    alpha: Tensor,
}

impl PRelu {
    pub fn new(vs: &ParamScope, channels: usize) -> Result<Self> {
        Ok(Self {
            alpha: vs.get(channels, "alpha", Init::Const(0.25))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        prelu(x, &self.alpha)
    }
}

/// Boolean attention pattern, `permitted(q, k)` for query row `q` and key column `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n_queries: usize,
    n_keys: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    /// Causal pattern for `n_queries` new positions appended after `n_keys - n_queries` cached ones.
    pub fn causal_with_history(n_queries: usize, n_keys: usize) -> Self {
        let offset = n_keys - n_queries;
        let allowed = (0..n_queries * n_keys)
            .map(|i| i % n_keys <= i / n_keys + offset)
            .collect();
        Self {
            n_queries,
            n_keys,
            allowed,
        }
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    pub fn n_keys(&self) -> usize {
        self.n_keys
    }

    pub fn permitted(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.n_keys + k]
    }

    pub fn rows(&self) -> Vec<Vec<bool>> {
        self.allowed
            .chunks(self.n_keys)
            .map(|r| r.to_vec())
            .collect()
    }

    pub fn count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    fn to_tensor(&self, device: &candle_core::Device) -> Result<Tensor> {
        let data: Vec<u8> = self.allowed.iter().map(|&a| a as u8).collect();
        Ok(Tensor::from_vec(data, (self.n_queries, self.n_keys), device)?)
    }
}

/// Scaled dot-product attention on `[B, H, T, dh]` tensors.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&AttentionMask>) -> Result<Tensor> {
    let dh = q.dim(D::Minus1)?;
    let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
    let scores = match mask {
        Some(m) => {
            let shape = scores.shape().clone();
            let keep = m.to_tensor(scores.device())?.broadcast_as(&shape)?;
            let neg = Tensor::new(f32::NEG_INFINITY, scores.device())?
                .to_dtype(scores.dtype())?
                .broadcast_as(&shape)?;
            keep.where_cond(&scores, &neg)?
        }
        None => scores,
    };
    let probs = candle_nn::ops::softmax(&scores, D::Minus1)?;
    Ok(probs.matmul(v)?)
}

/// Keys and values seen so far by a causal attention layer.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    k: Option<Tensor>,
    v: Option<Tensor>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.k.as_ref().map_or(0, |k| k.dims()[2])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Multi-head self-attention with fused query/key/value projection.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(vs: &ParamScope, dim: usize, heads: usize, init: Init) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            qkv: Linear::with_init(&vs.pp("qkv"), dim, 3 * dim, true, init)?,
            proj: Linear::with_init(&vs.pp("proj"), dim, dim, true, init)?,
            heads,
        })
    }

    fn qkv(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let d = x.dim(D::Minus1)?;
        let qkv = self.qkv.forward(x)?;
        let q = split_heads(&qkv.narrow(2, 0, d)?, self.heads)?;
        let k = split_heads(&qkv.narrow(2, d, d)?, self.heads)?;
        let v = split_heads(&qkv.narrow(2, 2 * d, d)?, self.heads)?;
        Ok((q, k, v))
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&AttentionMask>) -> Result<Tensor> {
        let (q, k, v) = self.qkv(x)?;
        let y = attention(&q, &k, &v, mask)?;
        self.proj.forward(&merge_heads(&y)?)
    }

    /// Causal attention for `x: [B, n, D]` new positions, extending `cache`.
    pub fn forward_step(&self, x: &Tensor, cache: &mut KvCache) -> Result<Tensor> {
        let (q, k, v) = self.qkv(x)?;
        let k = match cache.k.take() {
            Some(prev) => Tensor::cat(&[prev, k], 2)?,
            None => k,
        };
        let v = match cache.v.take() {
            Some(prev) => Tensor::cat(&[prev, v], 2)?,
            None => v,
        };
        let mask = AttentionMask::causal_with_history(q.dims()[2], k.dims()[2]);
        let y = attention(&q, &k, &v, Some(&mask))?;
        cache.k = Some(k);
        cache.v = Some(v);
        self.proj.forward(&merge_heads(&y)?)
    }
}

/// Splits `[B, T, H*dh]` into `[B, H, T, dh]`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, t, d) = x.dims3()?;
    Ok(x.reshape((b, t, heads, d / heads))?.transpose(1, 2)?.contiguous()?)
}

/// Inverse of [`split_heads`].
pub fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, h, t, dh) = x.dims4()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, t, h * dh))?)
}

/// Output length of a strided convolution without padding.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize) -> Option<usize> {
    (len >= kernel).then(|| (len - kernel) / stride + 1)
}

/// Output length of a transposed convolution.
pub fn deconv_out_len(len: usize, kernel: usize, stride: usize) -> usize {
    if len == 0 {
        0
    } else {
        (len - 1) * stride + kernel
    }
}

/// Cuts `x: [B, T]` into overlapping frames `[B, F, kernel]` with hop `stride`.
///
/// The kernel must be a whole multiple of the stride.
pub fn frame_signal(x: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    let (b, t) = x.dims2()?;
    if !kernel.is_multiple_of(stride) {
        return Err(Error::Config(format!(
            "kernel {kernel} is not a multiple of stride {stride}"
        )));
    }
    let frames = conv_out_len(t, kernel, stride).ok_or(Error::InputTooShort {
        what: "convolution kernel",
        needed: kernel,
        got: t,
    })?;
    let pieces = (0..kernel / stride)
        .map(|j| x.narrow(1, j * stride, frames * stride)?.reshape((b, frames, stride)))
        .collect::<candle_core::Result<Vec<_>>>()?;
    Ok(Tensor::cat(&pieces, 2)?)
}

/// Single-input-channel strided convolution (waveform analysis filterbank).
#[derive(Debug, Clone)]
pub struct FramedConv {
    weight: Tensor,
    bias: Option<Tensor>,
    kernel: usize,
    stride: usize,
}

impl FramedConv {
    pub fn new(
        vs: &ParamScope,
        kernel: usize,
        stride: usize,
        out_channels: usize,
        bias: bool,
    ) -> Result<Self> {
        if !kernel.is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "kernel {kernel} is not a multiple of stride {stride}"
            )));
        }
        let weight = vs.get((kernel, out_channels), "weight", Init::fan_in(kernel))?;
        let bias = if bias {
            Some(vs.get(out_channels, "bias", Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            kernel,
            stride,
        })
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn out_len(&self, len: usize) -> Option<usize> {
        conv_out_len(len, self.kernel, self.stride)
    }

    /// `x: [B, T]` to `[B, F, C]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let frames = frame_signal(x, self.kernel, self.stride)?;
        let y = frames.broadcast_matmul(&self.weight)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

/// Transposed convolution `[B, T, Cin] -> [B, (T-1)*stride + kernel, Cout]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose1d {
    weight: Tensor,
    bias: Option<Tensor>,
    kernel: usize,
    stride: usize,
    out_channels: usize,
}

impl ConvTranspose1d {
    pub fn new(
        vs: &ParamScope,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::Config("deconvolution kernel and stride must be >= 1".into()));
        }
        let weight = vs.get(
            (in_channels, kernel * out_channels),
            "weight",
            Init::fan_in(in_channels * kernel.div_ceil(stride)),
        )?;
        let bias = if bias {
            Some(vs.get(out_channels, "bias", Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            kernel,
            stride,
            out_channels,
        })
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    /// Per-input-frame contributions `[B, T, kernel, Cout]` before overlap-add and bias.
    pub fn contributions(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, cin) = x.dims3()?;
        let y = x.reshape((b * t, cin))?.matmul(&self.weight)?;
        Ok(y.reshape((b, t, self.kernel, self.out_channels))?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        let (k, s) = (self.kernel, self.stride);
        let m = k.div_ceil(s);
        let mut contrib = self.contributions(x)?;
        if m * s > k {
            contrib = contrib.pad_with_zeros(2, 0, m * s - k)?;
        }
        let mut acc: Option<Tensor> = None;
        for j in 0..m {
            let piece = contrib
                .narrow(2, j * s, s)?
                .contiguous()?
                .reshape((b, t * s, self.out_channels))?
                .pad_with_zeros(1, j * s, (m - 1 - j) * s)?;
            acc = Some(match acc {
                Some(a) => (a + piece)?,
                None => piece,
            });
        }
        let y = acc.expect("m >= 1").narrow(1, 0, deconv_out_len(t, k, s))?;
        Ok(match &self.bias {
            Some(bias) => y.broadcast_add(bias)?,
            None => y,
        })
    }
}

/// Per-channel (depthwise) convolution of `x: [B, T, C]` with `weight: [kernel, C]`.
///
/// `x` is zero-padded by `pad_left`/`pad_right` frames before filtering.
pub fn depthwise_conv(
    x: &Tensor,
    weight: &Tensor,
    dilation: usize,
    pad_left: usize,
    pad_right: usize,
) -> Result<Tensor> {
    fused::depthwise(x, weight, dilation, pad_left, pad_right)
}

/// Shift-and-add form of [`depthwise_conv`], kept as a test reference.
#[cfg(test)]
pub(crate) fn depthwise_conv_composed(
    x: &Tensor,
    weight: &Tensor,
    dilation: usize,
    pad_left: usize,
    pad_right: usize,
) -> Result<Tensor> {
    let (_, t, _) = x.dims3()?;
    let kernel = weight.dim(0)?;
    let span = (kernel - 1) * dilation;
    let padded = x.pad_with_zeros(1, pad_left, pad_right)?;
    let out_len = (t + pad_left + pad_right)
        .checked_sub(span)
        .ok_or(Error::InputTooShort {
            what: "depthwise convolution",
            needed: span,
            got: t,
        })?;
    let mut acc: Option<Tensor> = None;
    for j in 0..kernel {
        let tap = weight.narrow(0, j, 1)?.squeeze(0)?;
        let term = padded.narrow(1, j * dilation, out_len)?.broadcast_mul(&tap)?;
        acc = Some(match acc {
            Some(a) => (a + term)?,
            None => term,
        });
    }
    Ok(acc.expect("kernel >= 1"))
}

/// Converts a `[rows, cols]` tensor of any float dtype into nested `f64` rows.
pub fn to_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn store() -> ParamStore {
        ParamStore::new(3, DType::F64)
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn vec3(t: &Tensor) -> Vec<Vec<Vec<f64>>> {
        t.to_vec3::<f64>().unwrap()
    }

    #[test]
    fn framed_conv_matches_direct_convolution() {
        let s = store();
        let conv = FramedConv::new(&s.root().pp("c"), 16, 8, 5, true).unwrap();
        let x = randn(&[2, 100], 1);
        let y = vec3(&conv.forward(&x).unwrap());
        assert_eq!(y[0].len(), (100 - 16) / 8 + 1);
        let w = to_rows(&conv.weight).unwrap();
        let xs = x.to_vec2::<f64>().unwrap();
        for b in 0..2 {
            for f in 0..y[b].len() {
                for c in 0..5 {
                    let direct: f64 = (0..16).map(|k| xs[b][f * 8 + k] * w[k][c]).sum();
                    assert!((direct - y[b][f][c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn transposed_conv_matches_scatter_oracle() {
        for &(k, st) in &[(16, 8), (25, 20), (2, 2), (1, 5), (3, 1)] {
            let s = store();
            let dc = ConvTranspose1d::new(&s.root().pp("d"), 3, 2, k, st, false).unwrap();
            let x = randn(&[1, 7, 3], 2);
            let y = vec3(&dc.forward(&x).unwrap());
            assert_eq!(y[0].len(), deconv_out_len(7, k, st));
            let w = to_rows(&dc.weight).unwrap();
            let xs = vec3(&x);
            let mut oracle = vec![vec![0.0; 2]; deconv_out_len(7, k, st)];
            for t in 0..7 {
                for tap in 0..k {
                    for co in 0..2 {
                        for ci in 0..3 {
                            oracle[t * st + tap][co] += xs[0][t][ci] * w[ci][tap * 2 + co];
                        }
                    }
                }
            }
            for (a, b) in oracle.iter().flatten().zip(y[0].iter().flatten()) {
                assert!((a - b).abs() < 1e-12, "k={k} s={st}");
            }
        }
    }

    #[test]
    fn cumulative_norm_matches_prefix_statistics() {
        let x = randn(&[1, 5, 4], 4);
        let g = Tensor::ones(4, DType::F64, &Device::Cpu).unwrap();
        let b = Tensor::zeros(4, DType::F64, &Device::Cpu).unwrap();
        let y = vec3(&cumulative_layer_norm(&x, &g, &b).unwrap());
        let xs = vec3(&x);
        // row index 2 is the third row: statistics over the flattened 3x4 prefix
        let prefix: Vec<f64> = xs[0][..3].iter().flatten().copied().collect();
        let mean = prefix.iter().sum::<f64>() / 12.0;
        let var = prefix.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
        for c in 0..4 {
            let expect = (xs[0][2][c] - mean) / (var + LN_EPS).sqrt();
            assert!((expect - y[0][2][c]).abs() < 1e-10);
        }
    }

    #[test]
    fn cumulative_norm_single_row_is_layer_norm() {
        let s = store();
        let ln = LayerNorm::new(&s.root().pp("ln"), 6).unwrap();
        let x = randn(&[1, 1, 6], 5);
        let a = vec3(&ln.forward(&x).unwrap());
        let b = vec3(&ln.forward_cumulative(&x).unwrap());
        for (u, v) in a[0][0].iter().zip(&b[0][0]) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn cumulative_norm_of_constant_is_bias() {
        let x = (Tensor::ones((1, 7, 3), DType::F64, &Device::Cpu).unwrap() * 0.3).unwrap();
        let g = randn(&[3], 8);
        let b = randn(&[3], 9);
        let y = vec3(&cumulative_layer_norm(&x, &g, &b).unwrap());
        let bias = b.to_vec1::<f64>().unwrap();
        for row in &y[0] {
            for (v, e) in row.iter().zip(&bias) {
                assert!((v - e).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn streaming_cumulative_norm_matches_one_shot() {
        let x = randn(&[1, 9, 4], 10);
        let g = randn(&[4], 11);
        let b = randn(&[4], 12);
        let full = vec3(&cumulative_layer_norm(&x, &g, &b).unwrap());
        let mut st = CumulativeStats::default();
        let mut rows = Vec::new();
        for (start, len) in [(0, 1), (1, 3), (4, 5)] {
            let y = st.forward(&x.narrow(1, start, len).unwrap(), &g, &b).unwrap();
            rows.extend(vec3(&y).remove(0));
        }
        for (a, b) in full[0].iter().flatten().zip(rows.iter().flatten()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn causal_mask_counts() {
        let m = AttentionMask::causal_with_history(3, 3);
        assert_eq!(m.count(), 6);
        let m = AttentionMask::causal_with_history(2, 5);
        assert!(m.permitted(0, 3) && !m.permitted(0, 4) && m.permitted(1, 4));
    }

    #[test]
    fn masked_attention_ignores_future_keys() {
        let q = randn(&[1, 2, 4, 3], 20);
        let k = randn(&[1, 2, 4, 3], 21);
        let v = randn(&[1, 2, 4, 3], 22);
        let mask = AttentionMask::causal_with_history(4, 4);
        let a = attention(&q, &k, &v, Some(&mask)).unwrap();
        let k2 = k.narrow(2, 0, 2).unwrap();
        let v2 = v.narrow(2, 0, 2).unwrap();
        let q2 = q.narrow(2, 0, 2).unwrap();
        let m2 = AttentionMask::causal_with_history(2, 2);
        let b = attention(&q2, &k2, &v2, Some(&m2)).unwrap();
        let diff = (a.narrow(2, 0, 2).unwrap() - b)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn depthwise_causal_padding_preserves_length() {
        let x = randn(&[1, 10, 2], 30);
        let w = randn(&[3, 2], 31);
        let y = depthwise_conv(&x, &w, 4, 8, 0).unwrap();
        assert_eq!(y.dims(), &[1, 10, 2]);
        // output frame 0 only sees input frame 0
        let xs = vec3(&x);
        let ws = w.to_vec2::<f64>().unwrap();
        let ys = vec3(&y);
        assert!((ys[0][0][1] - xs[0][0][1] * ws[2][1]).abs() < 1e-12);
    }
}
