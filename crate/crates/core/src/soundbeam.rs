//! Offline mask-estimation extractor: conv encoder, conditioned temporal
//! convolution stack, transposed-conv decoder.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::aie;
use crate::error::{Error, Result};
use crate::nn::{
    depthwise_conv, ConvTranspose1d, FramedConv, GlobalLayerNorm, Init, Linear, PRelu, ParamScope,
};
use crate::signal::Waveform;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoundBeamConfig {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub bottleneck: usize,
    pub hidden: usize,
    pub skip: usize,
    pub conv_kernel: usize,
    pub blocks: usize,
    pub repeats: usize,
    pub embed_dim: usize,
}

impl SoundBeamConfig {
    /// Full-size geometry: 512 filters, 8 blocks x 3 repeats.
    pub fn full_scale() -> Self {
        Self {
            filters: 512,
            kernel: 16,
            stride: 8,
            bottleneck: 128,
            hidden: 512,
            skip: 128,
            conv_kernel: 3,
            blocks: 8,
            repeats: 3,
            embed_dim: 256,
        }
    }

    /// Reduced widths and depth for single-core training.
    pub fn toy() -> Self {
        Self {
            filters: 64,
            bottleneck: 32,
            hidden: 64,
            skip: 32,
            blocks: 4,
            repeats: 2,
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.kernel.is_multiple_of(self.stride) {
            return Err(Error::Config(format!(
                "encoder kernel {} must be a multiple of stride {}",
                self.kernel, self.stride
            )));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::Config("temporal conv kernel must be odd".into()));
        }
        if [self.filters, self.bottleneck, self.hidden, self.skip, self.blocks, self.repeats]
            .contains(&0)
        {
            return Err(Error::Config("SoundBeam widths and depths must be >= 1".into()));
        }
        Ok(())
    }

    /// Encoder frame count for `n` samples.
    pub fn frames(&self, n: usize) -> Option<usize> {
        crate::nn::conv_out_len(n, self.kernel, self.stride)
    }
}

#[derive(Debug, Clone)]
struct TcnBlock {
    inp: Linear,
    act1: PRelu,
    norm1: GlobalLayerNorm,
    dw: Tensor,
    dw_bias: Tensor,
    act2: PRelu,
    norm2: GlobalLayerNorm,
    res: Linear,
    skip: Linear,
    dilation: usize,
}

impl TcnBlock {
    fn new(vs: &ParamScope, cfg: &SoundBeamConfig, dilation: usize) -> Result<Self> {
        Ok(Self {
            inp: Linear::new(&vs.pp("in"), cfg.bottleneck, cfg.hidden, true)?,
            act1: PRelu::new(&vs.pp("act1"), cfg.hidden)?,
            norm1: GlobalLayerNorm::new(&vs.pp("norm1"), cfg.hidden)?,
            dw: vs.get(
                (cfg.conv_kernel, cfg.hidden),
                "dw.weight",
                Init::fan_in(cfg.conv_kernel),
            )?,
            dw_bias: vs.get(cfg.hidden, "dw.bias", Init::Zeros)?,
            act2: PRelu::new(&vs.pp("act2"), cfg.hidden)?,
            norm2: GlobalLayerNorm::new(&vs.pp("norm2"), cfg.hidden)?,
            res: Linear::new(&vs.pp("res"), cfg.hidden, cfg.bottleneck, true)?,
            skip: Linear::new(&vs.pp("skip"), cfg.hidden, cfg.skip, true)?,
            dilation,
        })
    }

    /// Returns `(residual output, skip contribution)`.
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.norm1.forward(&self.act1.forward(&self.inp.forward(x)?)?)?;
        let pad = (self.dw.dim(0)? - 1) / 2 * self.dilation;
        let h = depthwise_conv(&h, &self.dw, self.dilation, pad, pad)?.broadcast_add(&self.dw_bias)?;
        let h = self.norm2.forward(&self.act2.forward(&h)?)?;
        Ok(((x + self.res.forward(&h)?)?, self.skip.forward(&h)?))
    }
}

/// The offline extractor.
#[derive(Debug, Clone)]
pub struct SoundBeam {
    cfg: SoundBeamConfig,
    aux_dim: usize,
    encoder: FramedConv,
    in_norm: GlobalLayerNorm,
    in_proj: Linear,
    blocks: Vec<TcnBlock>,
    adapt: Vec<Linear>,
    mask_act: PRelu,
    mask_proj: Linear,
    decoder: ConvTranspose1d,
}

impl SoundBeam {
    /// `aux_dim` is the width of upsampled encoder features concatenated to the mixture encoding (0 for none).
    pub fn new(vs: &ParamScope, cfg: &SoundBeamConfig, aux_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let in_dim = cfg.filters + aux_dim;
        let mut blocks = Vec::with_capacity(cfg.blocks * cfg.repeats);
        for r in 0..cfg.repeats {
            for b in 0..cfg.blocks {
                blocks.push(TcnBlock::new(&vs.pp(format!("tcn.{r}.{b}")), cfg, 1 << b)?);
            }
        }
        let adapt = (0..cfg.repeats)
            .map(|r| Linear::new(&vs.pp(format!("adapt.{r}")), cfg.embed_dim, cfg.bottleneck, true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            aux_dim,
            encoder: FramedConv::new(&vs.pp("encoder"), cfg.kernel, cfg.stride, cfg.filters, false)?,
            in_norm: GlobalLayerNorm::new(&vs.pp("in_norm"), in_dim)?,
            in_proj: Linear::new(&vs.pp("in_proj"), in_dim, cfg.bottleneck, true)?,
            blocks,
            adapt,
            mask_act: PRelu::new(&vs.pp("mask_act"), cfg.skip)?,
            mask_proj: Linear::new(&vs.pp("mask_proj"), cfg.skip, cfg.filters, true)?,
            decoder: ConvTranspose1d::new(&vs.pp("decoder"), cfg.filters, 1, cfg.kernel, cfg.stride, false)?,
        })
    }

    pub fn config(&self) -> &SoundBeamConfig {
        &self.cfg
    }

    pub fn aux_dim(&self) -> usize {
        self.aux_dim
    }

    /// `x: [B, T]` to `Y: [B, T', filters]`.
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

    pub fn encode_waveform(&self, w: &Waveform, dtype: DType) -> Result<Tensor> {
        self.encode(&waveform_batch(std::slice::from_ref(w), dtype)?)
    }

    /// Mask in `[0, 1]` with the shape of `y`; `aux` is upsampled encoder features of any length.
    pub fn extract_mask(&self, y: &Tensor, e: &Tensor, aux: Option<&Tensor>) -> Result<Tensor> {
        let (b, _, _) = y.dims3()?;
        if e.dims() != [b, self.cfg.embed_dim] {
            return Err(Error::Shape(format!(
                "embedding shape {:?}, expected [{b}, {}]",
                e.dims(),
                self.cfg.embed_dim
            )));
        }
        let input = match (aux, self.aux_dim) {
            (None, 0) => y.clone(),
            (Some(a), d) if d > 0 && a.dim(2)? == d => aie::fuse(y, a, None)?.0,
            (a, d) => {
                return Err(Error::Shape(format!(
                    "auxiliary features {:?} for aux width {d}",
                    a.map(|t| t.dims().to_vec())
                )))
            }
        };
        let mut x = self.in_proj.forward(&self.in_norm.forward(&input)?)?;
        let mut skip_sum: Option<Tensor> = None;
        for (i, block) in self.blocks.iter().enumerate() {
            let (out, skip) = block.forward(&x)?;
            x = out;
            skip_sum = Some(match skip_sum {
                Some(s) => (s + skip)?,
                None => skip,
            });
            if i % self.cfg.blocks == 0 {
                let gain = self.adapt[i / self.cfg.blocks].forward(e)?.unsqueeze(1)?;
                x = x.broadcast_mul(&gain)?;
            }
        }
        let s = self.mask_act.forward(&skip_sum.expect("at least one block"))?;
        Ok(candle_nn::ops::sigmoid(&self.mask_proj.forward(&s)?)?)
    }

    /// Overlap-add decoder, output trimmed or zero-padded to `len` samples.
    pub fn decode(&self, masked: &Tensor, len: usize) -> Result<Tensor> {
        let y = self.decoder.forward(masked)?.squeeze(2)?;
        fit_length(&y, len)
    }

    /// Extraction for `x: [B, T]` with embeddings `e: [B, D_e]`.
    pub fn forward(&self, x: &Tensor, e: &Tensor, aux: Option<&Tensor>) -> Result<Tensor> {
        let y = self.encode(x)?;
        let m = self.extract_mask(&y, e, aux)?;
        self.decode(&(m * &y)?, x.dim(1)?)
    }
}

/// Trims or zero-pads `[B, T]` to `len` columns.
pub fn fit_length(y: &Tensor, len: usize) -> Result<Tensor> {
    let t = y.dim(1)?;
    Ok(if t >= len {
        y.narrow(1, 0, len)?
    } else {
        y.pad_with_zeros(1, 0, len - t)?
    })
}

/// Stacks equal-length waveforms into `[B, T]`.
pub fn waveform_batch(ws: &[Waveform], dtype: DType) -> Result<Tensor> {
    let n = ws.first().ok_or(Error::Empty("waveform batch"))?.len();
    if ws.iter().any(|w| w.len() != n) {
        return Err(Error::Shape("waveform batch with unequal lengths".into()));
    }
    let data: Vec<f32> = ws.iter().flat_map(|w| w.samples().iter().copied()).collect();
    Ok(Tensor::from_vec(data, (ws.len(), n), &Device::Cpu)?.to_dtype(dtype)?)
}
