//! Target embeddings from class labels or enrollment recordings.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::aie::{align_cls_pad, weighted_sum, LayerWeights};
use crate::error::{Error, Result};
use crate::m2d::FeatureStack;
use crate::nn::{FramedConv, LayerNorm, Linear, ParamScope};
use crate::signal::Waveform;

pub const DEFAULT_EMBED_DIM: usize = 256;
pub const ENROLL_KERNEL: usize = 40;
pub const ENROLL_STRIDE: usize = 20;

/// A fixed-size vector identifying the target class.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetEmbedding {
    vector: Vec<f32>,
}

impl TargetEmbedding {
    pub fn new(vector: Vec<f32>) -> Result<Self> {
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("target embedding"));
        }
        Ok(Self { vector })
    }

    /// Row `i` of a `[B, D_e]` tensor.
    pub fn from_tensor(t: &Tensor, i: usize) -> Result<Self> {
        let row = t.narrow(0, i, 1)?.flatten_all()?.to_dtype(DType::F32)?;
        Self::new(row.to_vec1()?)
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.vector
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.vector.clone(), (1, self.dim()), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClueKind {
    ClassLabel,
    Enrollment,
}

impl ClueKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ClueKind::ClassLabel => "class_label",
            ClueKind::Enrollment => "enrollment",
        }
    }
}

impl std::fmt::Display for ClueKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ClueKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class_label" | "label" => Ok(ClueKind::ClassLabel),
            "enrollment" | "enroll" => Ok(ClueKind::Enrollment),
            other => Err(Error::Clue(format!("unknown clue kind {other:?}"))),
        }
    }
}

/// A clue: exactly one of a class index or an enrollment waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct ClueSpec {
    kind: ClueKind,
    label: Option<usize>,
    enrollment: Option<Waveform>,
}

impl ClueSpec {
    pub fn label(class: usize) -> Self {
        Self {
            kind: ClueKind::ClassLabel,
            label: Some(class),
            enrollment: None,
        }
    }

    pub fn enrollment(w: Waveform) -> Self {
        Self {
            kind: ClueKind::Enrollment,
            label: None,
            enrollment: Some(w),
        }
    }

    /// Builds a clue from optional parts, rejecting both or neither.
    pub fn from_parts(label: Option<usize>, enrollment: Option<Waveform>) -> Result<Self> {
        match (label, enrollment) {
            (Some(l), None) => Ok(Self::label(l)),
            (None, Some(w)) => Ok(Self::enrollment(w)),
            (Some(_), Some(_)) => Err(Error::Clue("give a label or an enrollment, not both".into())),
            (None, None) => Err(Error::Clue("a label or an enrollment is required".into())),
        }
    }

    pub fn kind(&self) -> ClueKind {
        self.kind
    }

    pub fn class(&self) -> Option<usize> {
        self.label
    }

    pub fn waveform(&self) -> Option<&Waveform> {
        self.enrollment.as_ref()
    }
}

pub fn one_hot(class: usize, n_classes: usize) -> Result<Vec<f32>> {
    if class >= n_classes {
        return Err(Error::UnknownClass(class));
    }
    let mut v = vec![0.0; n_classes];
    v[class] = 1.0;
    Ok(v)
}

/// Returns the hot index of a strict one-hot vector.
pub fn validate_one_hot(v: &[f32]) -> Result<usize> {
    let mut hot = None;
    for (i, &x) in v.iter().enumerate() {
        if x == 1.0 {
            if hot.is_some() {
                return Err(Error::InvalidOneHot("more than one entry is 1".into()));
            }
            hot = Some(i);
        } else if x != 0.0 {
            return Err(Error::InvalidOneHot(format!("entry {i} is {x}, not 0 or 1")));
        }
    }
    hot.ok_or_else(|| Error::InvalidOneHot("no entry is 1".into()))
}

/// Two fully connected layers with layer normalization over a one-hot input.
#[derive(Debug, Clone)]
pub struct LabelEmbedder {
    fc1: Linear,
    ln1: LayerNorm,
    fc2: Linear,
    ln2: LayerNorm,
    n_classes: usize,
}

impl LabelEmbedder {
    pub fn new(vs: &ParamScope, n_classes: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&vs.pp("fc1"), n_classes, dim, true)?,
            ln1: LayerNorm::new(&vs.pp("ln1"), dim)?,
            fc2: Linear::new(&vs.pp("fc2"), dim, dim, true)?,
            ln2: LayerNorm::new(&vs.pp("ln2"), dim)?,
            n_classes,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// `one_hot: [B, C]` to `[B, D_e]`.
    pub fn forward(&self, one_hot: &Tensor) -> Result<Tensor> {
        let h = self.ln1.forward(&self.fc1.forward(one_hot)?)?.relu()?;
        self.ln2.forward(&self.fc2.forward(&h)?)
    }

    pub fn forward_classes(&self, classes: &[usize], dtype: DType) -> Result<Tensor> {
        let mut data = Vec::with_capacity(classes.len() * self.n_classes);
        for &c in classes {
            data.extend(one_hot(c, self.n_classes)?);
        }
        let x = Tensor::from_vec(data, (classes.len(), self.n_classes), &Device::Cpu)?;
        self.forward(&x.to_dtype(dtype)?)
    }

    pub fn embed(&self, one_hot: &[f32], dtype: DType) -> Result<TargetEmbedding> {
        if one_hot.len() != self.n_classes {
            return Err(Error::InvalidOneHot(format!(
                "length {} for {} classes",
                one_hot.len(),
                self.n_classes
            )));
        }
        validate_one_hot(one_hot)?;
        let x = Tensor::from_vec(one_hot.to_vec(), (1, self.n_classes), &Device::Cpu)?;
        TargetEmbedding::from_tensor(&self.forward(&x.to_dtype(dtype)?)?, 0)
    }
}

/// Strided conv block (kernel 40, stride 20) with ReLU and layer norm, mean-pooled over time.
#[derive(Debug, Clone)]
pub struct ConvEnrollmentEncoder {
    conv: FramedConv,
    ln: LayerNorm,
}

impl ConvEnrollmentEncoder {
    pub fn new(vs: &ParamScope, dim: usize) -> Result<Self> {
        Ok(Self {
            conv: FramedConv::new(&vs.pp("conv"), ENROLL_KERNEL, ENROLL_STRIDE, dim, true)?,
            ln: LayerNorm::new(&vs.pp("ln"), dim)?,
        })
    }

    pub fn n_frames(&self, n_samples: usize) -> Option<usize> {
        self.conv.out_len(n_samples)
    }

    /// Equal-length enrollments `[B, T]` to `[B, D_e]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.ln.forward(&self.conv.forward(x)?.relu()?)?;
        Ok(h.mean(1)?)
    }

    pub fn embed(&self, w: &Waveform, dtype: DType) -> Result<TargetEmbedding> {
        if w.len() < ENROLL_KERNEL {
            return Err(Error::InputTooShort {
                what: "enrollment encoder kernel",
                needed: ENROLL_KERNEL,
                got: w.len(),
            });
        }
        let x = Tensor::from_vec(w.samples().to_vec(), (1, w.len()), &Device::Cpu)?;
        TargetEmbedding::from_tensor(&self.forward(&x.to_dtype(dtype)?)?, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MhfaConfig {
    pub heads: usize,
    /// Per-head value width.
    pub head_dim: usize,
    /// Whether the class-token row takes part in pooling.
    pub pool_cls: bool,
}

impl Default for MhfaConfig {
    fn default() -> Self {
        Self {
            heads: 8,
            head_dim: 32,
            pool_cls: true,
        }
    }
}

/// Multi-head factorized attentive pooling over encoder layers.
#[derive(Debug, Clone)]
pub struct Mhfa {
    cfg: MhfaConfig,
    key_weights: LayerWeights,
    value_weights: LayerWeights,
    att: Linear,
    values: Linear,
    out: Linear,
}

impl Mhfa {
    pub fn new(
        vs: &ParamScope,
        cfg: &MhfaConfig,
        n_layers: usize,
        model_dim: usize,
        embed_dim: usize,
    ) -> Result<Self> {
        if cfg.heads == 0 || cfg.head_dim == 0 {
            return Err(Error::Config("MHFA needs at least one head of width >= 1".into()));
        }
        Ok(Self {
            cfg: cfg.clone(),
            key_weights: LayerWeights::new(vs, n_layers, "key_logits")?,
            value_weights: LayerWeights::new(vs, n_layers, "value_logits")?,
            att: Linear::new(&vs.pp("att"), model_dim, cfg.heads, false)?,
            values: Linear::new(&vs.pp("values"), model_dim, cfg.heads * cfg.head_dim, true)?,
            out: Linear::new(&vs.pp("out"), cfg.heads * cfg.head_dim, embed_dim, true)?,
        })
    }

    pub fn config(&self) -> &MhfaConfig {
        &self.cfg
    }

    pub fn key_weights(&self) -> &LayerWeights {
        &self.key_weights
    }

    pub fn value_weights(&self) -> &LayerWeights {
        &self.value_weights
    }

    pub fn key_weights_mut(&mut self) -> &mut LayerWeights {
        &mut self.key_weights
    }

    pub fn value_weights_mut(&mut self) -> &mut LayerWeights {
        &mut self.value_weights
    }

    fn uniform(&self, stack: &FeatureStack) -> Result<FeatureStack> {
        let u = align_cls_pad(stack)?;
        if u.len() != self.key_weights.len() {
            return Err(Error::Shape(format!(
                "stack has {} layers, MHFA expects {}",
                u.len(),
                self.key_weights.len()
            )));
        }
        if self.cfg.pool_cls || u.layers()[0].dim(1)? < 2 {
            return Ok(u);
        }
        let t = u.layers()[0].dim(1)?;
        FeatureStack::uniform(
            u.layers()
                .iter()
                .map(|z| z.narrow(1, 1, t - 1))
                .collect::<candle_core::Result<_>>()?,
        )
    }

    /// Key stream `sum_i softmax(lambda_K)_i Z_i`.
    pub fn keys(&self, stack: &FeatureStack) -> Result<Tensor> {
        weighted_sum(&self.uniform(stack)?, &self.key_weights.weights()?)
    }

    pub fn values(&self, stack: &FeatureStack) -> Result<Tensor> {
        weighted_sum(&self.uniform(stack)?, &self.value_weights.weights()?)
    }

    /// Per-head attention over time, `[B, T, H]`; positions at or beyond `lengths[b]` get zero weight.
    pub fn attention(&self, keys: &Tensor, lengths: Option<&[usize]>) -> Result<Tensor> {
        let logits = self.att.forward(keys)?;
        let logits = match lengths {
            None => logits,
            Some(lens) => {
                let (b, t, h) = logits.dims3()?;
                if lens.len() != b || lens.iter().any(|&l| l == 0 || l > t) {
                    return Err(Error::Shape(format!("invalid pooling lengths {lens:?} for T={t}")));
                }
                let keep: Vec<u8> = lens
                    .iter()
                    .flat_map(|&l| (0..t).map(move |i| (i < l) as u8))
                    .collect();
                let keep = Tensor::from_vec(keep, (b, t, 1), &Device::Cpu)?.broadcast_as((b, t, h))?;
                let neg = Tensor::new(f32::NEG_INFINITY, &Device::Cpu)?
                    .to_dtype(logits.dtype())?
                    .broadcast_as((b, t, h))?;
                keep.where_cond(&logits, &neg)?
            }
        };
        Ok(candle_nn::ops::softmax(&logits, 1)?)
    }

    /// Pools a stack into `[B, D_e]`; `lengths` optionally limits valid rows (after padding).
    pub fn forward(&self, stack: &FeatureStack, lengths: Option<&[usize]>) -> Result<Tensor> {
        let k = self.keys(stack)?;
        let v = self.values(stack)?;
        let a = self.attention(&k, lengths)?;
        let (b, t, h) = a.dims3()?;
        let vh = self
            .values
            .forward(&v)?
            .reshape((b, t, h, self.cfg.head_dim))?;
        // pooled[b, h, :] = sum_t a[b, t, h] * vh[b, t, h, :]
        let a = a.transpose(1, 2)?.contiguous()?.reshape((b * h, 1, t))?;
        let vh = vh
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * h, t, self.cfg.head_dim))?;
        let pooled = a.matmul(&vh)?.reshape((b, h * self.cfg.head_dim))?;
        self.out.forward(&pooled)
    }

    pub fn embed(&self, stack: &FeatureStack) -> Result<TargetEmbedding> {
        TargetEmbedding::from_tensor(&self.forward(stack, None)?, 0)
    }
}

/// Mean of `[B, T, C]` over time for the valid prefix of each item.
pub fn masked_mean(x: &Tensor, lengths: &[usize]) -> Result<Tensor> {
    let (b, t, _) = x.dims3()?;
    let w: Vec<f64> = lengths
        .iter()
        .flat_map(|&l| (0..t).map(move |i| if i < l { 1.0 / l as f64 } else { 0.0 }))
        .collect();
    let w = Tensor::from_vec(w, (b, 1, t), &Device::Cpu)?.to_dtype(x.dtype())?;
    Ok(w.matmul(x)?.squeeze(1)?)
}
