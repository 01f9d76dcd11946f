//! Causal online extractor: strided conv encoder, dilated causal convolutions,
//! one causal attention layer producing the mask, transposed-conv decoder.
//!
//! [`WaveformerStream`] runs the same computation chunk by chunk. It carries
//! the encoder input tail, per-layer convolution history, the attention
//! key/value cache and the decoder overlap, so its output matches the one-shot
//! forward pass.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::aie::{weighted_sum, Aie};
use crate::error::{Error, Result};
use crate::m2d::{causal_attention_mask, patches_from_columns, FeatureStack, M2dEncoder, M2dStream};
use crate::nn::{
    depthwise_conv, ConvTranspose1d, FramedConv, Init, KvCache, LayerNorm, Linear, ParamScope,
    SelfAttention,
};
use crate::signal::{MelExtractor, N_MELS};
use crate::soundbeam::fit_length;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveformerConfig {
    pub stride: usize,
    pub kernel: usize,
    pub channels: usize,
    pub n_dcc: usize,
    pub dcc_kernel: usize,
    pub heads: usize,
    pub embed_dim: usize,
}

impl WaveformerConfig {
    pub fn full_scale() -> Self {
        Self {
            stride: 32,
            kernel: 96,
            channels: 256,
            n_dcc: 10,
            dcc_kernel: 3,
            heads: 8,
            embed_dim: 256,
        }
    }

    pub fn toy() -> Self {
        Self {
            channels: 64,
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel != 3 * self.stride {
            return Err(Error::Config(format!(
                "encoder kernel {} must be three times the stride {}",
                self.kernel, self.stride
            )));
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} channels not divisible by {} heads",
                self.channels, self.heads
            )));
        }
        if self.n_dcc == 0 || self.dcc_kernel == 0 {
            return Err(Error::Config("need at least one DCC layer".into()));
        }
        Ok(())
    }

    pub fn dilations(&self) -> Vec<usize> {
        (0..self.n_dcc).map(|i| 1 << i).collect()
    }

    /// Frames seen by one output frame of the DCC stack.
    pub fn receptive_field(&self) -> usize {
        1 + self
            .dilations()
            .iter()
            .map(|d| (self.dcc_kernel - 1) * d)
            .sum::<usize>()
    }

    pub fn frames(&self, n: usize) -> Option<usize> {
        crate::nn::conv_out_len(n, self.kernel, self.stride)
    }

    /// Worst-case future samples that influence an output sample (encoder kernel overhang).
    pub fn lookahead_samples(&self) -> usize {
        self.kernel - 1
    }
}

#[derive(Debug, Clone)]
struct DccLayer {
    dw: Tensor,
    dw_bias: Tensor,
    norm1: LayerNorm,
    pw: Linear,
    norm2: LayerNorm,
    dilation: usize,
}

impl DccLayer {
    fn new(vs: &ParamScope, cfg: &WaveformerConfig, dilation: usize) -> Result<Self> {
        let c = cfg.channels;
        Ok(Self {
            dw: vs.get((cfg.dcc_kernel, c), "dw.weight", Init::fan_in(cfg.dcc_kernel))?,
            dw_bias: vs.get(c, "dw.bias", Init::Zeros)?,
            norm1: LayerNorm::new(&vs.pp("norm1"), c)?,
            pw: Linear::new(&vs.pp("pw"), c, c, true)?,
            norm2: LayerNorm::new(&vs.pp("norm2"), c)?,
            dilation,
        })
    }

    fn span(&self) -> usize {
        (self.dw.dims()[0] - 1) * self.dilation
    }

    /// `x` already carries `span` frames of history in front; returns the new frames only.
    fn forward_with_history(&self, x: &Tensor, history: usize) -> Result<Tensor> {
        let h = depthwise_conv(x, &self.dw, self.dilation, self.span() - history, 0)?
            .broadcast_add(&self.dw_bias)?;
        let h = self.norm1.forward(&h)?.relu()?;
        let h = self.norm2.forward(&self.pw.forward(&h)?)?.relu()?;
        let n = h.dim(1)?;
        let t = x.dim(1)? - history;
        let residual = x.narrow(1, history, t)?;
        Ok((residual + h.narrow(1, n - t, t)?)?)
    }
}

/// The online extractor.
#[derive(Debug, Clone)]
pub struct Waveformer {
    cfg: WaveformerConfig,
    encoder: FramedConv,
    dcc: Vec<DccLayer>,
    adapt: Linear,
    att_norm: LayerNorm,
    attention: SelfAttention,
    mask_norm: LayerNorm,
    mask_proj: Linear,
    decoder: ConvTranspose1d,
}

impl Waveformer {
    pub fn new(vs: &ParamScope, cfg: &WaveformerConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let dcc = cfg
            .dilations()
            .into_iter()
            .enumerate()
            .map(|(i, d)| DccLayer::new(&vs.pp(format!("dcc.{i}")), cfg, d))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            encoder: FramedConv::new(&vs.pp("encoder"), cfg.kernel, cfg.stride, c, true)?,
            dcc,
            adapt: Linear::new(&vs.pp("adapt"), cfg.embed_dim, c, true)?,
            att_norm: LayerNorm::new(&vs.pp("att_norm"), c)?,
            attention: SelfAttention::new(&vs.pp("attention"), c, cfg.heads, Init::fan_in(c))?,
            mask_norm: LayerNorm::new(&vs.pp("mask_norm"), c)?,
            mask_proj: Linear::new(&vs.pp("mask_proj"), c, c, true)?,
            decoder: ConvTranspose1d::new(&vs.pp("decoder"), c, 1, cfg.kernel, cfg.stride, false)?,
        })
    }

    pub fn config(&self) -> &WaveformerConfig {
        &self.cfg
    }

    /// `x: [B, T]` to `[B, T'', channels]`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let t = x.dim(1)?;
        if t < self.cfg.kernel {
            return Err(Error::InputTooShort {
                what: "extractor encoder kernel",
                needed: self.cfg.kernel,
                got: t,
            });
        }
        Ok(self.encoder.forward(x)?.relu()?)
    }

    fn check_embedding(&self, input: &Tensor, e: &Tensor) -> Result<()> {
        let b = input.dim(0)?;
        if e.dims() != [b, self.cfg.embed_dim] {
            return Err(Error::Shape(format!(
                "embedding shape {:?}, expected [{b}, {}]",
                e.dims(),
                self.cfg.embed_dim
            )));
        }
        if input.dim(2)? != self.cfg.channels {
            return Err(Error::Shape(format!(
                "mask input has {} channels, expected {}",
                input.dim(2)?,
                self.cfg.channels
            )));
        }
        Ok(())
    }

    /// Causal mask over `input: [B, T'', C]` (the encoding, or its fusion with encoder features).
    pub fn dcc_mask(&self, input: &Tensor, e: &Tensor) -> Result<Tensor> {
        self.check_embedding(input, e)?;
        let gain = self.adapt.forward(e)?.unsqueeze(1)?;
        let mut x = input.clone();
        for (i, layer) in self.dcc.iter().enumerate() {
            x = layer.forward_with_history(&x, 0)?;
            if i == 0 {
                x = x.broadcast_mul(&gain)?;
            }
        }
        let mask = causal_attention_mask(x.dim(1)?);
        let x = (&x + self.attention.forward(&self.att_norm.forward(&x)?, Some(&mask))?)?;
        Ok(candle_nn::ops::sigmoid(&self.mask_proj.forward(&self.mask_norm.forward(&x)?)?)?)
    }

    pub fn decode(&self, masked: &Tensor, len: usize) -> Result<Tensor> {
        fit_length(&self.decoder.forward(masked)?.squeeze(2)?, len)
    }

    /// One-shot causal extraction; `fused` replaces the encoding as mask input when present.
    pub fn forward_encoded(&self, y: &Tensor, fused: Option<&Tensor>, e: &Tensor, len: usize) -> Result<Tensor> {
        let m = self.dcc_mask(fused.unwrap_or(y), e)?;
        self.decode(&(m * y)?, len)
    }

    pub fn forward(&self, x: &Tensor, e: &Tensor) -> Result<Tensor> {
        let y = self.encode(x)?;
        self.forward_encoded(&y, None, e, x.dim(1)?)
    }

    /// Starts a streaming session for one utterance with embedding `e: [1, D_e]`.
    pub fn stream<'a>(&'a self, e: &Tensor, aux: Option<AuxStream<'a>>) -> Result<WaveformerStream<'a>> {
        let c = self.cfg.channels;
        let dtype = e.dtype();
        let history = self
            .dcc
            .iter()
            .map(|l| Tensor::zeros((1, l.span(), c), dtype, &Device::Cpu))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let gain = self.adapt.forward(e)?.unsqueeze(1)?;
        Ok(WaveformerStream {
            model: self,
            e: e.clone(),
            gain,
            aux,
            input: Vec::new(),
            frames_done: 0,
            history,
            cache: KvCache::default(),
            pending: Vec::new(),
            emitted: 0,
            dtype,
        })
    }
}

/// Incremental causal encoder features for the streaming path.
///
/// Mel columns are computed once their full window has arrived, tokens once
/// both of their columns exist; upsampled rows are released only when no
/// later token can change them.
pub struct AuxStream<'a> {
    aie: &'a Aie,
    m2d: M2dStream<'a>,
    mel: MelExtractor,
    samples: Vec<f32>,
    columns: Vec<[f32; N_MELS]>,
    columns_used: usize,
    rows: Vec<Tensor>,
    upsampled: Option<Tensor>,
    settled: usize,
}

impl<'a> AuxStream<'a> {
    pub fn new(encoder: &'a M2dEncoder, aie: &'a Aie) -> Result<Self> {
        let m2d = encoder.stream()?;
        let cls = FeatureStack::uniform(m2d.cls_rows().to_vec())?;
        let first = weighted_sum(&cls, &aie.layer_weights().weights()?)?;
        let mut s = Self {
            aie,
            m2d,
            mel: MelExtractor::new(),
            samples: Vec::new(),
            columns: Vec::new(),
            columns_used: 0,
            rows: vec![first],
            upsampled: None,
            settled: 0,
        };
        s.refresh()?;
        Ok(s)
    }

    fn refresh(&mut self) -> Result<()> {
        let rows = Tensor::cat(&self.rows, 1)?;
        self.upsampled = Some(self.aie.upsample(&rows)?);
        self.settled = self.aie.config().settled_len(self.rows.len());
        Ok(())
    }

    fn push_samples(&mut self, chunk: &[f32]) -> Result<()> {
        self.samples.extend_from_slice(chunk);
        let hop = self.mel.hop();
        let pad = self.mel.pad();
        let mut added = false;
        loop {
            let f = self.columns.len();
            let needed = (f * hop + pad).max(pad + 1);
            if self.samples.len() < needed {
                break;
            }
            // left padding only matters for the first frames; the window never reaches past `needed`
            let padded = self.mel.reflect_left(&self.samples[..needed]);
            let mut col = [0.0f32; N_MELS];
            self.mel.frame_into(&padded, f * hop, &mut col);
            self.columns.push(col);
            let pt = self.m2d_patch_time();
            if self.columns.len() - self.columns_used >= pt {
                let cols = &self.columns[self.columns_used..self.columns_used + pt];
                let patch = patches_from_columns(cols, self.m2d_config())?;
                self.columns_used += pt;
                let layer_rows = self.m2d.push_patches(&patch)?;
                let stack = FeatureStack::uniform(layer_rows)?;
                let w = self.aie.layer_weights().weights()?;
                self.rows.push(weighted_sum(&stack, &w)?);
                added = true;
            }
        }
        if added {
            self.refresh()?;
        }
        Ok(())
    }

    fn m2d_patch_time(&self) -> usize {
        self.m2d_config().patch_time
    }

    fn m2d_config(&self) -> &crate::m2d::EncoderConfig {
        self.m2d.config()
    }

    /// Upsampled rows `[1, n, C']` for frames `start..start + n`.
    fn frames(&self, start: usize, n: usize) -> Result<Tensor> {
        if start + n > self.settled {
            return Err(Error::Shape(format!(
                "encoder features for frame {} are not settled yet ({} available)",
                start + n,
                self.settled
            )));
        }
        Ok(self
            .upsampled
            .as_ref()
            .expect("refreshed at construction")
            .narrow(1, start, n)?)
    }
}

/// Chunked inference state for one utterance.
pub struct WaveformerStream<'a> {
    model: &'a Waveformer,
    e: Tensor,
    gain: Tensor,
    aux: Option<AuxStream<'a>>,
    input: Vec<f32>,
    frames_done: usize,
    history: Vec<Tensor>,
    cache: KvCache,
    pending: Vec<f32>,
    emitted: usize,
    dtype: DType,
}

impl WaveformerStream<'_> {
    pub fn embedding(&self) -> &Tensor {
        &self.e
    }

    pub fn frames_done(&self) -> usize {
        self.frames_done
    }

    /// Feeds a chunk (a whole number of strides) and returns the samples that became final.
    pub fn push(&mut self, chunk: &[f32]) -> Result<Vec<f32>> {
        let cfg = &self.model.cfg;
        if !chunk.len().is_multiple_of(cfg.stride) {
            return Err(Error::Config(format!(
                "chunk of {} samples is not a multiple of the stride {}",
                chunk.len(),
                cfg.stride
            )));
        }
        if let Some(aux) = self.aux.as_mut() {
            aux.push_samples(chunk)?;
        }
        self.input.extend_from_slice(chunk);
        let Some(n_new) = cfg.frames(self.input.len()) else {
            return Ok(Vec::new());
        };
        let used = (n_new - 1) * cfg.stride + cfg.kernel;
        let x = Tensor::from_vec(self.input[..used].to_vec(), (1, used), &Device::Cpu)?
            .to_dtype(self.dtype)?;
        self.input.drain(..n_new * cfg.stride);
        let y = self.model.encode(&x)?;

        let mut h = match self.aux.as_ref() {
            Some(aux) => {
                let ym = aux.frames(self.frames_done, n_new)?;
                aux.aie.fuse(&y, &ym)?.0
            }
            None => y.clone(),
        };
        for (i, layer) in self.model.dcc.iter().enumerate() {
            let span = layer.span();
            let with_hist = Tensor::cat(&[&self.history[i], &h], 1)?;
            let total = with_hist.dim(1)?;
            self.history[i] = with_hist.narrow(1, total - span, span)?;
            h = layer.forward_with_history(&with_hist, span)?;
            if i == 0 {
                h = h.broadcast_mul(&self.gain)?;
            }
        }
        let a = self
            .model
            .attention
            .forward_step(&self.model.att_norm.forward(&h)?, &mut self.cache)?;
        let h = (&h + a)?;
        let m = candle_nn::ops::sigmoid(
            &self.model.mask_proj.forward(&self.model.mask_norm.forward(&h)?)?,
        )?;
        let out = self
            .model
            .decoder
            .forward(&(m * y)?)?
            .flatten_all()?
            .to_dtype(DType::F32)?
            .to_vec1::<f32>()?;
        if self.pending.len() < out.len() {
            self.pending.resize(out.len(), 0.0);
        }
        for (p, v) in self.pending.iter_mut().zip(&out) {
            *p += v;
        }
        self.frames_done += n_new;
        let ready = n_new * cfg.stride;
        let done: Vec<f32> = self.pending.drain(..ready).collect();
        self.emitted += done.len();
        Ok(done)
    }

    /// Flushes the decoder overlap and pads the utterance to `total_len` samples.
    pub fn finish(mut self, total_len: usize) -> Vec<f32> {
        let mut out = std::mem::take(&mut self.pending);
        let remaining = total_len.saturating_sub(self.emitted);
        out.resize(remaining, 0.0);
        out
    }
}

/// Runs a whole utterance through a stream in `chunk`-sample pieces.
pub fn stream_utterance(stream: WaveformerStream<'_>, x: &[f32], chunk: usize) -> Result<Vec<f32>> {
    let mut stream = stream;
    if chunk == 0 {
        return Err(Error::Config("chunk size must be positive".into()));
    }
    let mut out = Vec::with_capacity(x.len());
    let whole = x.len() / chunk * chunk;
    for piece in x[..whole].chunks(chunk) {
        out.extend(stream.push(piece)?);
    }
    let rest = &x[whole..];
    let stride = stream.model.cfg.stride;
    let aligned = rest.len() / stride * stride;
    if aligned > 0 {
        out.extend(stream.push(&rest[..aligned])?);
    }
    out.extend(stream.finish(x.len()));
    Ok(out)
}
