//! Miniature ViT-style audio encoder over log-mel patches.
//!
//! A patch projection turns each 80x2 mel patch into a token, a learned
//! class token is prepended, and a stack of pre-norm transformer blocks
//! follows. Every intermediate output is exposed as a [`FeatureStack`].
//!
//! The same parameters run in two modes: `Offline` uses full attention and
//! per-token layer norm; `Causal` swaps in masked attention and cumulative
//! layer norm so token `t` only ever sees tokens `0..=t`.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    AttentionMask, CumulativeStats, Init, KvCache, LayerNorm, Linear, ParamScope, SelfAttention,
};
use crate::signal::{MelSpectrogram, Waveform, N_MELS};

pub use crate::nn::cumulative_layer_norm;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    #[default]
    Offline,
    Causal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_blocks: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub patch_freq: usize,
    pub patch_time: usize,
    pub mlp_ratio: usize,
    pub mode: EncoderMode,
    /// Fixed input normalization applied to log-mel values.
    pub mel_mean: f32,
    pub mel_std: f32,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl EncoderConfig {
    pub fn toy() -> Self {
        Self {
            n_blocks: 2,
            model_dim: 64,
            n_heads: 4,
            patch_freq: N_MELS,
            patch_time: 2,
            mlp_ratio: 4,
            mode: EncoderMode::Offline,
            mel_mean: -6.0,
            mel_std: 5.0,
        }
    }

    /// Geometry of the full-size encoder (12 blocks, 768 wide).
    pub fn full_scale() -> Self {
        Self {
            n_blocks: 12,
            model_dim: 768,
            n_heads: 12,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.model_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "encoder model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.patch_freq != N_MELS {
            return Err(Error::Config(format!(
                "patch height {} must equal the {N_MELS} mel bands",
                self.patch_freq
            )));
        }
        if self.patch_time == 0 || self.n_blocks == 0 {
            return Err(Error::Config("patch width and block count must be >= 1".into()));
        }
        Ok(())
    }

    pub fn patch_len(&self) -> usize {
        self.patch_freq * self.patch_time
    }

    /// Number of entries in the feature stack (patch embedding plus one per block).
    pub fn n_layers(&self) -> usize {
        self.n_blocks + 1
    }
}

/// Number of tokens for a mel input of `n_frames` frames; a trailing partial patch is dropped.
pub fn token_count(n_frames: usize, cfg: &EncoderConfig) -> Result<usize> {
    if n_frames < cfg.patch_time {
        return Err(Error::InputTooShort {
            what: "one patch",
            needed: cfg.patch_time,
            got: n_frames,
        });
    }
    Ok(n_frames / cfg.patch_time)
}

/// Causal attention pattern: query `q` may attend to key `k` iff `k <= q`.
///
/// Position 0 holds the class token, which therefore attends only to itself
/// and is visible to every later query.
pub fn causal_attention_mask(n_tokens: usize) -> AttentionMask {
    AttentionMask::causal_with_history(n_tokens, n_tokens)
}

/// Flattens mel patches into `[B, n_tokens, patch_freq * patch_time]` (frequency-major).
pub fn patchify(mels: &[MelSpectrogram], cfg: &EncoderConfig) -> Result<Tensor> {
    let first = mels.first().ok_or(Error::Empty("mel batch"))?;
    let n_frames = first.n_frames();
    if mels.iter().any(|m| m.n_frames() != n_frames) {
        return Err(Error::Shape("mel batch with unequal frame counts".into()));
    }
    if first.n_mels() != cfg.patch_freq {
        return Err(Error::Shape(format!(
            "{} mel bands but patch height {}",
            first.n_mels(),
            cfg.patch_freq
        )));
    }
    let n_tokens = token_count(n_frames, cfg)?;
    let pt = cfg.patch_time;
    let mut data = Vec::with_capacity(mels.len() * n_tokens * cfg.patch_len());
    for mel in mels {
        for j in 0..n_tokens {
            for m in 0..cfg.patch_freq {
                for dt in 0..pt {
                    let v = (mel.get(m, j * pt + dt) - cfg.mel_mean) / cfg.mel_std;
                    data.push(v);
                }
            }
        }
    }
    Ok(Tensor::from_vec(
        data,
        (mels.len(), n_tokens, cfg.patch_len()),
        &Device::Cpu,
    )?)
}

/// Patches from consecutive mel columns (`frames.len()` must be a multiple of the patch width).
pub fn patches_from_columns(frames: &[[f32; N_MELS]], cfg: &EncoderConfig) -> Result<Tensor> {
    let pt = cfg.patch_time;
    if !frames.len().is_multiple_of(pt) {
        return Err(Error::Shape(format!(
            "{} mel columns do not form whole patches of width {pt}",
            frames.len()
        )));
    }
    let n = frames.len() / pt;
    let mut data = Vec::with_capacity(n * cfg.patch_len());
    for j in 0..n {
        for m in 0..cfg.patch_freq {
            for dt in 0..pt {
                data.push((frames[j * pt + dt][m] - cfg.mel_mean) / cfg.mel_std);
            }
        }
    }
    Ok(Tensor::from_vec(data, (1, n, cfg.patch_len()), &Device::Cpu)?)
}

/// Fixed sinusoidal position table `[n, dim]` for token indices `start..start + n`.
fn sinusoidal(start: usize, n: usize, dim: usize, dtype: DType) -> Result<Tensor> {
    let mut data = Vec::with_capacity(n * dim);
    for pos in start..start + n {
        for i in 0..dim {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = pos as f64 * freq;
            data.push(if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    Ok(Tensor::from_vec(data, (n, dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Per-layer encoder outputs `Z_0 .. Z_N`, each `[B, T, D]`.
///
/// `Z_0` is the patch embedding and has no class-token row; the block outputs
/// `Z_1..Z_N` carry it at row 0.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    layers: Vec<Tensor>,
    has_patch_layer: bool,
}

impl FeatureStack {
    pub fn new(layers: Vec<Tensor>) -> Result<Self> {
        let stack = Self {
            layers,
            has_patch_layer: true,
        };
        stack.validate()?;
        Ok(stack)
    }

    /// A stack whose entries already share one shape (no separate patch layer).
    pub fn uniform(layers: Vec<Tensor>) -> Result<Self> {
        let stack = Self {
            layers,
            has_patch_layer: false,
        };
        stack.validate()?;
        Ok(stack)
    }

    fn validate(&self) -> Result<()> {
        let first = self.layers.first().ok_or(Error::Empty("feature stack"))?;
        let (b, t0, d) = first.dims3()?;
        let expect_t = if self.has_patch_layer && self.layers.len() > 1 {
            t0 + 1
        } else {
            t0
        };
        for (i, z) in self.layers.iter().enumerate().skip(1) {
            let dims = z.dims3()?;
            if dims != (b, expect_t, d) {
                return Err(Error::Shape(format!(
                    "layer {i} has shape {dims:?}, expected {:?}",
                    (b, expect_t, d)
                )));
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// True when `Z_0` still lacks the class-token row.
    pub fn has_patch_layer(&self) -> bool {
        self.has_patch_layer
    }

    pub fn into_layers(self) -> Vec<Tensor> {
        self.layers
    }

    pub fn detach(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|t| t.detach()).collect(),
            has_patch_layer: self.has_patch_layer,
        }
    }

    /// Batch item `i` as a stack with batch size 1.
    pub fn item(&self, i: usize) -> Result<Self> {
        Ok(Self {
            layers: self
                .layers
                .iter()
                .map(|t| t.narrow(0, i, 1))
                .collect::<candle_core::Result<_>>()?,
            has_patch_layer: self.has_patch_layer,
        })
    }

    /// Rows `[start, start + len)` of every layer of a uniform stack.
    pub fn rows(&self, start: usize, len: usize) -> Result<Self> {
        if self.has_patch_layer && self.layers.len() > 1 {
            return Err(Error::Shape("row slice of a stack with a separate patch layer".into()));
        }
        Ok(Self {
            layers: self
                .layers
                .iter()
                .map(|t| t.narrow(1, start, len))
                .collect::<candle_core::Result<_>>()?,
            has_patch_layer: self.has_patch_layer,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.layers.last().map_or(0, |t| t.dim(1).unwrap_or(0))
    }

    /// Concatenates stacks with identical geometry along the batch axis.
    pub fn cat(stacks: &[FeatureStack]) -> Result<Self> {
        let first = stacks.first().ok_or(Error::Empty("feature stack batch"))?;
        let layers = (0..first.len())
            .map(|l| {
                let parts: Vec<&Tensor> = stacks.iter().map(|s| &s.layers[l]).collect();
                Tensor::cat(&parts, 0)
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        let stack = Self {
            layers,
            has_patch_layer: first.has_patch_layer,
        };
        stack.validate()?;
        Ok(stack)
    }
}

#[derive(Debug, Clone)]
struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    attn: SelfAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    fn new(vs: &ParamScope, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.model_dim;
        let init = Init::TruncNormal(INIT_STD);
        Ok(Self {
            ln1: LayerNorm::new(&vs.pp("ln1"), d)?,
            attn: SelfAttention::new(&vs.pp("attn"), d, cfg.n_heads, init)?,
            ln2: LayerNorm::new(&vs.pp("ln2"), d)?,
            mlp: Mlp {
                fc1: Linear::with_init(&vs.pp("mlp.fc1"), d, d * cfg.mlp_ratio, true, init)?,
                fc2: Linear::with_init(&vs.pp("mlp.fc2"), d * cfg.mlp_ratio, d, true, init)?,
            },
        })
    }

    fn forward(&self, x: &Tensor, mode: EncoderMode) -> Result<Tensor> {
        match mode {
            EncoderMode::Offline => {
                let h = (x + self.attn.forward(&self.ln1.forward(x)?, None)?)?;
                Ok((&h + self.mlp.forward(&self.ln2.forward(&h)?)?)?)
            }
            EncoderMode::Causal => {
                let mask = causal_attention_mask(x.dims()[1]);
                let a = self.attn.forward(&self.ln1.forward_cumulative(x)?, Some(&mask))?;
                let h = (x + a)?;
                Ok((&h + self.mlp.forward(&self.ln2.forward_cumulative(&h)?)?)?)
            }
        }
    }

    fn step(&self, x: &Tensor, st: &mut BlockState) -> Result<Tensor> {
        let n1 = st.ln1.forward(x, self.ln1.gain(), self.ln1.bias())?;
        let h = (x + self.attn.forward_step(&n1, &mut st.cache)?)?;
        let n2 = st.ln2.forward(&h, self.ln2.gain(), self.ln2.bias())?;
        Ok((&h + self.mlp.forward(&n2)?)?)
    }
}

#[derive(Debug, Clone, Default)]
struct BlockState {
    ln1: CumulativeStats,
    ln2: CumulativeStats,
    cache: KvCache,
}

/// The encoder: patch projection, class token, sinusoidal positions, transformer blocks.
#[derive(Debug, Clone)]
pub struct M2dEncoder {
    cfg: EncoderConfig,
    patch_embed: Linear,
    cls: Tensor,
    blocks: Vec<Block>,
    dtype: DType,
}

impl M2dEncoder {
    pub fn new(vs: &ParamScope, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let init = Init::TruncNormal(INIT_STD);
        let patch_embed =
            Linear::with_init(&vs.pp("patch_embed"), cfg.patch_len(), cfg.model_dim, true, init)?;
        let cls = vs.get(cfg.model_dim, "cls_token", init)?;
        let blocks = (0..cfg.n_blocks)
            .map(|i| Block::new(&vs.pp(format!("blocks.{i}")), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed,
            cls,
            blocks,
            dtype: vs.dtype(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Projects raw patches `[B, n, patch_len]` to tokens `Z_0: [B, n, D]`.
    pub fn embed_patches(&self, patches: &Tensor) -> Result<Tensor> {
        self.patch_embed.forward(&patches.to_dtype(self.dtype)?)
    }

    /// Encodes a batch of equal-length mel spectrograms in the configured mode.
    pub fn encode(&self, mels: &[MelSpectrogram]) -> Result<FeatureStack> {
        self.encode_mode(mels, self.cfg.mode)
    }

    pub fn encode_mode(&self, mels: &[MelSpectrogram], mode: EncoderMode) -> Result<FeatureStack> {
        let patches = patchify(mels, &self.cfg)?;
        self.encode_patches(&patches, mode)
    }

    pub fn encode_waveforms(&self, ws: &[Waveform], mode: EncoderMode) -> Result<FeatureStack> {
        let mels = ws
            .iter()
            .map(crate::signal::logmel)
            .collect::<Result<Vec<_>>>()?;
        self.encode_mode(&mels, mode)
    }

    pub fn encode_patches(&self, patches: &Tensor, mode: EncoderMode) -> Result<FeatureStack> {
        let z0 = self.embed_patches(patches)?;
        let (b, n, d) = z0.dims3()?;
        let pos = sinusoidal(0, n, d, self.dtype)?;
        let tokens = z0.broadcast_add(&pos)?;
        let cls = self.cls.reshape((1, 1, d))?.broadcast_as((b, 1, d))?;
        let mut x = Tensor::cat(&[&cls, &tokens], 1)?;
        let mut layers = Vec::with_capacity(self.blocks.len() + 1);
        layers.push(z0);
        for block in &self.blocks {
            x = block.forward(&x, mode)?;
            layers.push(x.clone());
        }
        FeatureStack::new(layers)
    }

    /// Starts incremental causal encoding; the class token is processed immediately.
    pub fn stream(&self) -> Result<M2dStream<'_>> {
        let mut states = vec![BlockState::default(); self.blocks.len()];
        let d = self.cfg.model_dim;
        let mut x = self.cls.reshape((1, 1, d))?;
        let mut cls_rows = vec![Tensor::zeros((1, 1, d), self.dtype, &Device::Cpu)?];
        for (block, st) in self.blocks.iter().zip(states.iter_mut()) {
            x = block.step(&x, st)?;
            cls_rows.push(x.clone());
        }
        Ok(M2dStream {
            enc: self,
            states,
            n_tokens: 0,
            cls_rows,
        })
    }
}

/// Incremental causal encoder state (per-block key/value cache and norm statistics).
pub struct M2dStream<'a> {
    enc: &'a M2dEncoder,
    states: Vec<BlockState>,
    n_tokens: usize,
    cls_rows: Vec<Tensor>,
}

impl M2dStream<'_> {
    /// Row 0 of every layer of the uniform (class-token-aligned) stack; `Z_0` is zero there.
    pub fn cls_rows(&self) -> &[Tensor] {
        &self.cls_rows
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn config(&self) -> &EncoderConfig {
        self.enc.config()
    }

    /// Feeds `[1, n, patch_len]` new patches; returns their rows for every layer.
    pub fn push_patches(&mut self, patches: &Tensor) -> Result<Vec<Tensor>> {
        let z0 = self.enc.embed_patches(patches)?;
        let (_, n, d) = z0.dims3()?;
        let pos = sinusoidal(self.n_tokens, n, d, self.enc.dtype)?;
        let mut x = z0.broadcast_add(&pos)?;
        let mut rows = Vec::with_capacity(self.enc.blocks.len() + 1);
        rows.push(z0);
        for (block, st) in self.enc.blocks.iter().zip(self.states.iter_mut()) {
            x = block.step(&x, st)?;
            rows.push(x.clone());
        }
        self.n_tokens += n;
        Ok(rows)
    }
}
