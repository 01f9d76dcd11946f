//! Full extraction model: clue encoders, optional encoder feature paths, backbone.

use std::str::FromStr;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::aie::{Aie, AieConfig};
use crate::clue::{
    ClueKind, ClueSpec, ConvEnrollmentEncoder, LabelEmbedder, Mhfa, MhfaConfig, DEFAULT_EMBED_DIM,
};
use crate::error::{Error, Result};
use crate::m2d::{EncoderConfig, EncoderMode, FeatureStack, M2dEncoder};
use crate::nn::ParamStore;
use crate::signal::{Waveform, SAMPLE_RATE};
use crate::soundbeam::{waveform_batch, SoundBeam, SoundBeamConfig};
use crate::waveformer::{stream_utterance, AuxStream, Waveformer, WaveformerConfig};

/// Parameter-name prefix of the audio encoder (frozen by default during training).
pub const M2D_PREFIX: &str = "m2d.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    SoundBeam,
    Waveformer,
}

impl FromStr for Backbone {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soundbeam" => Ok(Backbone::SoundBeam),
            "waveformer" => Ok(Backbone::Waveformer),
            other => Err(Error::Config(format!("unknown backbone {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub n_classes: usize,
    pub embed_dim: usize,
    /// Enrollment clue through attentive pooling over encoder layers (else the conv encoder).
    pub m2d_enroll: bool,
    /// Encoder features of the mixture fused into the extractor input.
    pub m2d_mixture: bool,
    pub m2d: EncoderConfig,
    pub aie: AieConfig,
    pub mhfa: MhfaConfig,
    pub soundbeam: SoundBeamConfig,
    pub waveformer: WaveformerConfig,
}

/// Names of the built-in model presets, four per backbone.
pub const PRESETS: [&str; 8] = [
    "soundbeam-baseline",
    "soundbeam-m2d-enroll",
    "soundbeam-m2d-mixture",
    "soundbeam-m2d-full",
    "waveformer-baseline",
    "waveformer-m2d-enroll",
    "waveformer-m2d-mixture",
    "waveformer-m2d-full",
];

impl ModelConfig {
    /// Toy-scale configuration for `backbone` with both encoder paths off.
    pub fn toy(backbone: Backbone, n_classes: usize) -> Self {
        let mut m2d = EncoderConfig::toy();
        let aie = match backbone {
            Backbone::SoundBeam => AieConfig::soundbeam(32),
            Backbone::Waveformer => {
                m2d.mode = EncoderMode::Causal;
                AieConfig::waveformer(32)
            }
        };
        Self {
            backbone,
            n_classes,
            embed_dim: DEFAULT_EMBED_DIM,
            m2d_enroll: false,
            m2d_mixture: false,
            m2d,
            aie,
            mhfa: MhfaConfig::default(),
            soundbeam: SoundBeamConfig::toy(),
            waveformer: WaveformerConfig::toy(),
        }
    }

    pub fn preset(name: &str, n_classes: usize) -> Result<Self> {
        let (backbone, rest) = name
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("unknown preset {name:?}")))?;
        let mut cfg = Self::toy(backbone.parse()?, n_classes);
        match rest {
            "baseline" => {}
            "m2d-enroll" => cfg.m2d_enroll = true,
            "m2d-mixture" => cfg.m2d_mixture = true,
            "m2d-full" => {
                cfg.m2d_enroll = true;
                cfg.m2d_mixture = true;
            }
            _ => return Err(Error::Config(format!("unknown preset {name:?}"))),
        }
        Ok(cfg)
    }

    pub fn uses_m2d(&self) -> bool {
        self.m2d_enroll || self.m2d_mixture
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        self.m2d.validate()?;
        self.aie.validate()?;
        match self.backbone {
            Backbone::SoundBeam => self.soundbeam.validate(),
            Backbone::Waveformer => {
                if self.m2d_mixture && self.m2d.mode != EncoderMode::Causal {
                    return Err(Error::Config(
                        "the online backbone needs the causal encoder mode for mixture features".into(),
                    ));
                }
                self.waveformer.validate()
            }
        }
    }

    /// Shortest mixture the model accepts.
    pub fn min_samples(&self) -> usize {
        let kernel = match self.backbone {
            Backbone::SoundBeam => self.soundbeam.kernel,
            Backbone::Waveformer => self.waveformer.kernel,
        };
        if self.m2d_mixture {
            kernel.max(448)
        } else {
            kernel
        }
    }
}

#[derive(Debug, Clone)]
enum EnrollEncoder {
    Conv(ConvEnrollmentEncoder),
    Mhfa(Mhfa),
}

#[derive(Debug, Clone)]
enum Extractor {
    SoundBeam(SoundBeam),
    Waveformer(Waveformer),
}

/// A complete extraction model over one parameter store.
#[derive(Debug, Clone)]
pub struct TseModel {
    cfg: ModelConfig,
    store: ParamStore,
    label: LabelEmbedder,
    enroll: EnrollEncoder,
    m2d: Option<M2dEncoder>,
    aie: Option<Aie>,
    extractor: Extractor,
    encoder_frozen: bool,
}

impl TseModel {
    pub fn new(cfg: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        Self::with_store(cfg, ParamStore::new(seed, dtype))
    }

    /// Builds the model over `store`, creating missing parameters or loading them from its source.
    pub fn with_store(cfg: &ModelConfig, store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let root = store.root();
        let de = cfg.embed_dim;
        let m2d = if cfg.uses_m2d() {
            Some(M2dEncoder::new(&root.pp("m2d"), &cfg.m2d)?)
        } else {
            None
        };
        let label = LabelEmbedder::new(&root.pp("clue.label"), cfg.n_classes, de)?;
        let enroll = if cfg.m2d_enroll {
            EnrollEncoder::Mhfa(Mhfa::new(
                &root.pp("clue.mhfa"),
                &cfg.mhfa,
                cfg.m2d.n_layers(),
                cfg.m2d.model_dim,
                de,
            )?)
        } else {
            EnrollEncoder::Conv(ConvEnrollmentEncoder::new(&root.pp("clue.conv"), de)?)
        };
        let (aie, extractor) = match cfg.backbone {
            Backbone::SoundBeam => {
                let sb_cfg = SoundBeamConfig {
                    embed_dim: de,
                    ..cfg.soundbeam.clone()
                };
                let aie = if cfg.m2d_mixture {
                    Some(Aie::new(
                        &root.pp("aie"),
                        &AieConfig {
                            bottleneck: false,
                            ..cfg.aie.clone()
                        },
                        cfg.m2d.n_layers(),
                        cfg.m2d.model_dim,
                        sb_cfg.filters,
                    )?)
                } else {
                    None
                };
                let aux = if cfg.m2d_mixture { cfg.aie.channels } else { 0 };
                let sb = SoundBeam::new(&root.pp("extractor"), &sb_cfg, aux)?;
                (aie, Extractor::SoundBeam(sb))
            }
            Backbone::Waveformer => {
                let wf_cfg = WaveformerConfig {
                    embed_dim: de,
                    ..cfg.waveformer.clone()
                };
                let aie = if cfg.m2d_mixture {
                    Some(Aie::new(
                        &root.pp("aie"),
                        &AieConfig {
                            bottleneck: true,
                            ..cfg.aie.clone()
                        },
                        cfg.m2d.n_layers(),
                        cfg.m2d.model_dim,
                        wf_cfg.channels,
                    )?)
                } else {
                    None
                };
                (aie, Extractor::Waveformer(Waveformer::new(&root.pp("extractor"), &wf_cfg)?))
            }
        };
        Ok(Self {
            cfg: cfg.clone(),
            store,
            label,
            enroll,
            m2d,
            aie,
            extractor,
            encoder_frozen: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// When set, encoder features are detached so no gradient reaches the encoder.
    pub fn set_encoder_frozen(&mut self, frozen: bool) {
        self.encoder_frozen = frozen;
    }

    pub fn encoder_frozen(&self) -> bool {
        self.encoder_frozen
    }

    fn maybe_detach(&self, s: FeatureStack) -> FeatureStack {
        if self.encoder_frozen {
            s.detach()
        } else {
            s
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn m2d(&self) -> Option<&M2dEncoder> {
        self.m2d.as_ref()
    }

    pub fn aie(&self) -> Option<&Aie> {
        self.aie.as_ref()
    }

    pub fn aie_mut(&mut self) -> Option<&mut Aie> {
        self.aie.as_mut()
    }

    pub fn mhfa(&self) -> Option<&Mhfa> {
        match &self.enroll {
            EnrollEncoder::Mhfa(m) => Some(m),
            EnrollEncoder::Conv(_) => None,
        }
    }

    pub fn label_embedder(&self) -> &LabelEmbedder {
        &self.label
    }

    /// Class-label embeddings `[B, D_e]`.
    pub fn embed_labels(&self, classes: &[usize]) -> Result<Tensor> {
        if let Some(&c) = classes.iter().find(|&&c| c >= self.cfg.n_classes) {
            return Err(Error::UnknownClass(c));
        }
        self.label.forward_classes(classes, self.dtype())
    }

    /// Enrollment embeddings `[B, D_e]`; equal-length enrollments are batched.
    pub fn embed_enrollments(&self, ws: &[Waveform]) -> Result<Tensor> {
        let first = ws.first().ok_or(Error::Empty("enrollment batch"))?;
        if ws.iter().any(|w| w.len() != first.len()) {
            let rows = ws
                .iter()
                .map(|w| self.embed_enrollments(std::slice::from_ref(w)))
                .collect::<Result<Vec<_>>>()?;
            return Ok(Tensor::cat(&rows, 0)?);
        }
        for w in ws {
            check_rate(w)?;
        }
        match &self.enroll {
            EnrollEncoder::Conv(enc) => {
                if first.len() < crate::clue::ENROLL_KERNEL {
                    return Err(Error::InputTooShort {
                        what: "enrollment encoder kernel",
                        needed: crate::clue::ENROLL_KERNEL,
                        got: first.len(),
                    });
                }
                enc.forward(&waveform_batch(ws, self.dtype())?)
            }
            EnrollEncoder::Mhfa(mhfa) => {
                let m2d = self.m2d.as_ref().expect("encoder present with MHFA");
                // enrollments are processed offline even for the online backbone
                let stack = self.maybe_detach(m2d.encode_waveforms(ws, EncoderMode::Offline)?);
                mhfa.forward(&stack, None)
            }
        }
    }

    /// Enrollment embeddings from precomputed offline encoder stacks (MHFA models only).
    pub fn embed_enrollment_stacks(&self, stacks: &[FeatureStack]) -> Result<Tensor> {
        let mhfa = self
            .mhfa()
            .ok_or_else(|| Error::Clue("enrollment stacks need the encoder enrollment path".into()))?;
        let first = stacks.first().ok_or(Error::Empty("enrollment batch"))?;
        if stacks.iter().any(|s| s.n_rows() != first.n_rows()) {
            let rows = stacks
                .iter()
                .map(|s| mhfa.forward(s, None))
                .collect::<Result<Vec<_>>>()?;
            return Ok(Tensor::cat(&rows, 0)?);
        }
        mhfa.forward(&FeatureStack::cat(stacks)?, None)
    }

    /// Samples per row of the cls-padded mixture stack as seen by the extractor, when the mixture path is on.
    ///
    /// A waveform crop starting at a multiple of this offset lines up with whole rows of the
    /// full-length stack (see [`Self::crop_mixture_stack`]).
    pub fn feature_granule(&self) -> Option<usize> {
        let aie = self.aie.as_ref()?;
        let stride = match &self.extractor {
            Extractor::SoundBeam(m) => m.config().stride,
            Extractor::Waveformer(m) => m.config().stride,
        };
        Some(aie.config().total_stride() * stride)
    }

    /// Rows of a full-length mixture stack (batch 1) that feed a crop of `len` samples at `offset`.
    ///
    /// `offset` must be a multiple of [`Self::feature_granule`]. The result is uniform and can
    /// stand in for the stack of the cropped waveform; only the transposed-convolution overlap
    /// at the left edge differs from a full-length pass.
    pub fn crop_mixture_stack(&self, full: &FeatureStack, offset: usize, len: usize) -> Result<FeatureStack> {
        let g = self
            .feature_granule()
            .ok_or_else(|| Error::Config("mixture stack crop without the mixture path".into()))?;
        if !offset.is_multiple_of(g) {
            return Err(Error::Config(format!("crop offset {offset} is not a multiple of {g}")));
        }
        let padded = crate::aie::align_cls_pad(full)?;
        let total = padded.n_rows();
        let start = (offset / g).min(total.saturating_sub(1));
        let want = len.div_ceil(g) + 1;
        padded.rows(start, want.min(total - start))
    }

    pub fn embed_clue(&self, clue: &ClueSpec) -> Result<Tensor> {
        match clue.kind() {
            ClueKind::ClassLabel => self.embed_labels(&[clue.class().expect("label clue")]),
            ClueKind::Enrollment => {
                self.embed_enrollments(std::slice::from_ref(clue.waveform().expect("enrollment clue")))
            }
        }
    }

    /// Encoder feature stack of the mixtures in the configured mode, when the mixture path is on.
    pub fn mixture_stack(&self, mixtures: &[Waveform]) -> Result<Option<FeatureStack>> {
        match (&self.m2d, self.cfg.m2d_mixture) {
            (Some(m2d), true) => Ok(Some(
                self.maybe_detach(m2d.encode_waveforms(mixtures, self.cfg.m2d.mode)?),
            )),
            _ => Ok(None),
        }
    }

    /// Extraction for `x: [B, T]` with embeddings `e: [B, D_e]`.
    ///
    /// `stack` must hold the mixture features when the mixture path is on (see [`Self::mixture_stack`]).
    pub fn forward(&self, x: &Tensor, stack: Option<&FeatureStack>, e: &Tensor) -> Result<Tensor> {
        let len = x.dim(1)?;
        let ym = match (&self.aie, stack) {
            (Some(aie), Some(s)) => Some(aie.features(s)?),
            (Some(_), None) => {
                return Err(Error::Config("mixture features required by this model".into()))
            }
            (None, _) => None,
        };
        match &self.extractor {
            Extractor::SoundBeam(sb) => sb.forward(x, e, ym.as_ref()),
            Extractor::Waveformer(wf) => {
                let y = wf.encode(x)?;
                let fused = match (&self.aie, &ym) {
                    (Some(aie), Some(ym)) => Some(aie.fuse(&y, ym)?.0),
                    _ => None,
                };
                wf.forward_encoded(&y, fused.as_ref(), e, len)
            }
        }
    }

    /// Target estimates for a batch of equal-length mixtures and precomputed embeddings.
    pub fn forward_waveforms(&self, mixtures: &[Waveform], e: &Tensor) -> Result<Tensor> {
        for w in mixtures {
            check_rate(w)?;
            if w.len() < self.cfg.min_samples() {
                return Err(Error::InputTooShort {
                    what: "mixture",
                    needed: self.cfg.min_samples(),
                    got: w.len(),
                });
            }
        }
        let x = waveform_batch(mixtures, self.dtype())?;
        let stack = self.mixture_stack(mixtures)?;
        self.forward(&x, stack.as_ref(), e)
    }

    /// Extracts the clue's target from one mixture; output length equals input length.
    pub fn extract(&self, mixture: &Waveform, clue: &ClueSpec) -> Result<Waveform> {
        let e = self.embed_clue(clue)?;
        let y = self.forward_waveforms(std::slice::from_ref(mixture), &e)?;
        tensor_to_waveform(&y, 0)
    }

    /// Chunked online extraction (online backbone only).
    pub fn extract_streaming(&self, mixture: &Waveform, clue: &ClueSpec, chunk: usize) -> Result<Waveform> {
        let Extractor::Waveformer(wf) = &self.extractor else {
            return Err(Error::Config("streaming needs the online backbone".into()));
        };
        check_rate(mixture)?;
        if chunk == 0 || !chunk.is_multiple_of(wf.config().stride) {
            return Err(Error::Config(format!(
                "chunk of {chunk} samples is not a multiple of the stride {}",
                wf.config().stride
            )));
        }
        let e = self.embed_clue(clue)?;
        let aux = match (&self.m2d, &self.aie) {
            (Some(m2d), Some(aie)) => Some(AuxStream::new(m2d, aie)?),
            _ => None,
        };
        let out = stream_utterance(wf.stream(&e, aux)?, mixture.samples(), chunk)?;
        Waveform::new(out, SAMPLE_RATE)
    }

    /// Softmax layer weights of the mixture path, if present.
    pub fn aie_weights(&self) -> Result<Option<Vec<f64>>> {
        self.aie
            .as_ref()
            .map(|a| a.layer_weights().weights_vec())
            .transpose()
    }

    /// Key and value layer weights of the attentive-pooling enrollment encoder, if present.
    pub fn mhfa_weights(&self) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
        match &self.enroll {
            EnrollEncoder::Mhfa(m) => Ok(Some((
                m.key_weights().weights_vec()?,
                m.value_weights().weights_vec()?,
            ))),
            EnrollEncoder::Conv(_) => Ok(None),
        }
    }
}

fn check_rate(w: &Waveform) -> Result<()> {
    if w.sample_rate() != SAMPLE_RATE {
        return Err(Error::SampleRate {
            expected: SAMPLE_RATE,
            got: w.sample_rate(),
        });
    }
    Ok(())
}

/// Row `i` of a `[B, T]` tensor as a 16 kHz waveform.
pub fn tensor_to_waveform(t: &Tensor, i: usize) -> Result<Waveform> {
    let v = t.narrow(0, i, 1)?.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    Waveform::new(v, SAMPLE_RATE)
}
