//! Adaptive input enhancer: a convex mix of encoder layers, upsampled by a
//! transposed-convolution cascade and concatenated with the encoded mixture.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::m2d::FeatureStack;
use crate::nn::{deconv_out_len, ConvTranspose1d, Init, Linear, ParamScope};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AieConfig {
    /// `(kernel, stride)` per transposed convolution, applied in order.
    pub deconv: Vec<(usize, usize)>,
    /// Output width of every deconvolution.
    pub channels: usize,
    /// Adds a pointwise projection back to the extractor width after concatenation.
    pub bottleneck: bool,
    pub deconv_bias: bool,
}

impl AieConfig {
    /// 50 tokens/s up to the 2000 frames/s of a stride-8 encoder.
    pub fn soundbeam(channels: usize) -> Self {
        Self {
            deconv: vec![(2, 2), (25, 20)],
            channels,
            bottleneck: false,
            deconv_bias: true,
        }
    }

    pub fn waveformer(channels: usize) -> Self {
        Self {
            deconv: vec![(2, 2), (2, 2), (2, 2), (1, 5)],
            channels,
            bottleneck: true,
            deconv_bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.deconv.is_empty() {
            return Err(Error::Config("AIE needs at least one deconvolution".into()));
        }
        if self.deconv.iter().any(|&(k, s)| k == 0 || s == 0) || self.channels == 0 {
            return Err(Error::Config("AIE kernels, strides and width must be >= 1".into()));
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        self.deconv.iter().map(|&(_, s)| s).product()
    }

    /// Length after the cascade for `len` input rows.
    pub fn upsampled_len(&self, len: usize) -> usize {
        self.deconv
            .iter()
            .fold(len, |n, &(k, s)| deconv_out_len(n, k, s))
    }

    /// Number of leading output positions that no later input row can change.
    pub fn settled_len(&self, len: usize) -> usize {
        // position p of a deconv receives input i only when i * s <= p
        self.deconv
            .iter()
            .fold(len, |n, &(k, s)| (n * s).min(deconv_out_len(n, k, s)))
    }
}

/// Prepends an all-zero row to `Z_0` so every layer shares the class-token geometry.
pub fn align_cls_pad(stack: &FeatureStack) -> Result<FeatureStack> {
    if stack.is_empty() {
        return Err(Error::Empty("feature stack"));
    }
    if !stack.has_patch_layer() {
        return Ok(stack.clone());
    }
    let mut layers = stack.layers().to_vec();
    if layers.len() == 1 {
        return FeatureStack::uniform(layers);
    }
    layers[0] = layers[0].pad_with_zeros(1, 1, 0)?;
    FeatureStack::uniform(layers)
}

/// `sum_i w_i Z_i` over a uniform stack; `weights` is a length-`L` vector.
pub fn weighted_sum(stack: &FeatureStack, weights: &Tensor) -> Result<Tensor> {
    if stack.has_patch_layer() && stack.len() > 1 {
        return Err(Error::Shape(
            "weighted sum needs a uniform stack (apply align_cls_pad first)".into(),
        ));
    }
    let n = stack.len();
    if weights.dims() != [n] {
        return Err(Error::Shape(format!(
            "{} layer weights for {n} layers",
            weights.elem_count()
        )));
    }
    let z = Tensor::stack(stack.layers(), 0)?;
    let dims = stack.layers()[0].dims().to_vec();
    let flat = z.reshape((n, ()))?;
    let w = weights.to_dtype(flat.dtype())?.reshape((1, n))?;
    Ok(w.matmul(&flat)?.reshape(dims)?)
}

/// Learnable softmax-normalized weights over encoder layers.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    logits: Tensor,
    forced: Option<Tensor>,
}

impl LayerWeights {
    pub fn new(vs: &ParamScope, n_layers: usize, name: &str) -> Result<Self> {
        Ok(Self {
            logits: vs.get(n_layers, name, Init::Zeros)?,
            forced: None,
        })
    }

    pub fn len(&self) -> usize {
        self.logits.elem_count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn weights(&self) -> Result<Tensor> {
        match &self.forced {
            Some(w) => Ok(w.clone()),
            None => Ok(candle_nn::ops::softmax(&self.logits, D::Minus1)?),
        }
    }

    pub fn weights_vec(&self) -> Result<Vec<f64>> {
        Ok(self.weights()?.to_dtype(candle_core::DType::F64)?.to_vec1()?)
    }

    /// Replaces the softmax with fixed weights (e.g. a hard one-hot); `None` restores it.
    pub fn set_override(&mut self, weights: Option<&[f64]>) -> Result<()> {
        self.forced = match weights {
            None => None,
            Some(w) => {
                if w.len() != self.len() {
                    return Err(Error::Shape(format!(
                        "override has {} weights for {} layers",
                        w.len(),
                        self.len()
                    )));
                }
                Some(
                    Tensor::from_vec(w.to_vec(), w.len(), self.logits.device())?
                        .to_dtype(self.logits.dtype())?,
                )
            }
        };
        Ok(())
    }
}

/// Where the upsampled features landed relative to the extractor frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Alignment {
    pub upsampled_len: usize,
    pub target_len: usize,
}

/// Trims or zero-pads `ym: [B, Tu, C]` at the tail to `target_len` frames.
pub fn align_length(ym: &Tensor, target_len: usize) -> Result<Tensor> {
    let tu = ym.dim(1)?;
    Ok(if tu >= target_len {
        ym.narrow(1, 0, target_len)?
    } else {
        ym.pad_with_zeros(1, 0, target_len - tu)?
    })
}

/// Concatenates `y: [B, T, D]` with the length-aligned M2D branch, then applies `bottleneck`.
pub fn fuse(y: &Tensor, ym: &Tensor, bottleneck: Option<&Linear>) -> Result<(Tensor, Alignment)> {
    let (b, t, _) = y.dims3()?;
    let (bm, tu, _) = ym.dims3()?;
    if b != bm {
        return Err(Error::Shape(format!("batch {b} vs M2D batch {bm}")));
    }
    let ym = align_length(&ym.to_dtype(y.dtype())?, t)?;
    let cat = Tensor::cat(&[y, &ym], 2)?;
    let out = match bottleneck {
        Some(l) => l.forward(&cat)?,
        None => cat,
    };
    Ok((
        out,
        Alignment {
            upsampled_len: tu,
            target_len: t,
        },
    ))
}

/// Layer weights, upsampling cascade and optional fusion bottleneck.
#[derive(Debug, Clone)]
pub struct Aie {
    cfg: AieConfig,
    weights: LayerWeights,
    deconvs: Vec<ConvTranspose1d>,
    bottleneck: Option<Linear>,
}

impl Aie {
    pub fn new(
        vs: &ParamScope,
        cfg: &AieConfig,
        n_layers: usize,
        model_dim: usize,
        extractor_dim: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let weights = LayerWeights::new(vs, n_layers, "layer_logits")?;
        let mut deconvs = Vec::with_capacity(cfg.deconv.len());
        let mut cin = model_dim;
        for (i, &(k, s)) in cfg.deconv.iter().enumerate() {
            deconvs.push(ConvTranspose1d::new(
                &vs.pp(format!("deconv.{i}")),
                cin,
                cfg.channels,
                k,
                s,
                cfg.deconv_bias,
            )?);
            cin = cfg.channels;
        }
        let bottleneck = if cfg.bottleneck {
            Some(Linear::new(
                &vs.pp("bottleneck"),
                extractor_dim + cfg.channels,
                extractor_dim,
                true,
            )?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            weights,
            deconvs,
            bottleneck,
        })
    }

    pub fn config(&self) -> &AieConfig {
        &self.cfg
    }

    pub fn layer_weights(&self) -> &LayerWeights {
        &self.weights
    }

    pub fn layer_weights_mut(&mut self) -> &mut LayerWeights {
        &mut self.weights
    }

    /// Channel count the extractor sees after fusion.
    pub fn fused_dim(&self, extractor_dim: usize) -> usize {
        if self.bottleneck.is_some() {
            extractor_dim
        } else {
            extractor_dim + self.cfg.channels
        }
    }

    /// Runs the transposed-convolution cascade on `[B, T, model_dim]`.
    pub fn upsample(&self, z: &Tensor) -> Result<Tensor> {
        let mut x = z.clone();
        for d in &self.deconvs {
            x = d.forward(&x)?;
        }
        Ok(x)
    }

    /// Weighted layer mix of an aligned stack, `[B, T_m, model_dim]`.
    pub fn mix(&self, stack: &FeatureStack) -> Result<Tensor> {
        let uniform = align_cls_pad(stack)?;
        weighted_sum(&uniform, &self.weights.weights()?)
    }

    /// `DeConv(sum_i w_i Z_i)` for a raw encoder stack.
    pub fn features(&self, stack: &FeatureStack) -> Result<Tensor> {
        self.upsample(&self.mix(stack)?)
    }

    pub fn fuse(&self, y: &Tensor, ym: &Tensor) -> Result<(Tensor, Alignment)> {
        fuse(y, ym, self.bottleneck.as_ref())
    }

    /// Full enhancer: features of `stack` fused with encoded mixture `y`.
    pub fn forward(&self, y: &Tensor, stack: &FeatureStack) -> Result<(Tensor, Alignment)> {
        self.fuse(y, &self.features(stack)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn raw_stack(tokens: usize, dim: usize, n_blocks: usize, seed: u64) -> FeatureStack {
        let mut layers = vec![randn(&[1, tokens, dim], seed)];
        for i in 0..n_blocks {
            layers.push(randn(&[1, tokens + 1, dim], seed + 1 + i as u64));
        }
        FeatureStack::new(layers).unwrap()
    }

    fn flat(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn cls_pad_prepends_zero_row() {
        let stack = raw_stack(300, 8, 2, 1);
        let u = align_cls_pad(&stack).unwrap();
        assert!(!u.has_patch_layer());
        for z in u.layers() {
            assert_eq!(z.dims(), &[1, 301, 8]);
        }
        assert!(flat(&u.layers()[0].narrow(1, 0, 1).unwrap()).iter().all(|&v| v == 0.0));
        assert_eq!(
            flat(&u.layers()[0].narrow(1, 1, 300).unwrap()),
            flat(&stack.layers()[0])
        );
        let again = align_cls_pad(&u).unwrap();
        assert_eq!(flat(&again.layers()[0]), flat(&u.layers()[0]));
        assert!(FeatureStack::new(vec![]).is_err());
    }

    #[test]
    fn weighted_sum_matches_direct_summation() {
        let u = align_cls_pad(&raw_stack(5, 3, 2, 9)).unwrap();
        let logits = [0.3, -1.2, 0.8];
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let w: Vec<f64> = e.iter().map(|v| v / s).collect();
        let got = flat(&weighted_sum(&u, &Tensor::new(w.as_slice(), &Device::Cpu).unwrap()).unwrap());
        let layers: Vec<Vec<f64>> = u.layers().iter().map(flat).collect();
        for (i, g) in got.iter().enumerate() {
            let want: f64 = (0..3).map(|l| w[l] * layers[l][i]).sum();
            assert!((g - want).abs() < 1e-6);
        }
    }

    #[test]
    fn weighted_sum_vertices_and_identical_layers() {
        let u = align_cls_pad(&raw_stack(4, 3, 2, 2)).unwrap();
        let one_hot = Tensor::new(&[0.0f64, 1.0, 0.0], &Device::Cpu).unwrap();
        assert_eq!(flat(&weighted_sum(&u, &one_hot).unwrap()), flat(&u.layers()[1]));
        let z = randn(&[1, 4, 3], 5);
        let same = FeatureStack::uniform(vec![z.clone(), z.clone(), z.clone()]).unwrap();
        let w = Tensor::new(&[1.0f64 / 3.0; 3], &Device::Cpu).unwrap();
        let out = flat(&weighted_sum(&same, &w).unwrap());
        for (a, b) in out.iter().zip(flat(&z)) {
            assert!((a - b).abs() < 1e-12);
        }
        let raw = raw_stack(4, 3, 2, 2);
        assert!(weighted_sum(&raw, &w).is_err());
    }

    #[test]
    fn soundbeam_preset_lengths() {
        let cfg = AieConfig::soundbeam(8);
        assert_eq!(cfg.total_stride(), 40);
        assert_eq!(cfg.upsampled_len(301), (301 * 2 - 1) * 20 + 25);
        assert_eq!(cfg.upsampled_len(301), 12045);
        let store = ParamStore::new(1, DType::F64);
        let aie = Aie::new(&store.root(), &cfg, 3, 16, 32).unwrap();
        let up = aie.upsample(&randn(&[1, 301, 16], 3)).unwrap();
        assert_eq!(up.dims(), &[1, 12045, 8]);
        let y = randn(&[1, 11999, 32], 4);
        let (fused, al) = aie.fuse(&y, &up).unwrap();
        assert_eq!(fused.dims(), &[1, 11999, 40]);
        assert_eq!(al, Alignment { upsampled_len: 12045, target_len: 11999 });
    }

    #[test]
    fn waveformer_preset_overshoots_and_is_trimmed() {
        let cfg = AieConfig::waveformer(8);
        assert_eq!(cfg.total_stride(), 40);
        assert_eq!(cfg.upsampled_len(301), 40 * 301 - 4);
        let store = ParamStore::new(1, DType::F64);
        let aie = Aie::new(&store.root(), &cfg, 3, 16, 12).unwrap();
        let y = randn(&[1, 2998, 12], 4);
        let (fused, al) = aie.forward(&y, &raw_stack(300, 16, 2, 5)).unwrap();
        assert_eq!(fused.dims(), &[1, 2998, 12]);
        assert_eq!(al.upsampled_len, 12036);
    }

    #[test]
    fn unit_deconv_preserves_length_and_zero_maps_to_zero() {
        let cfg = AieConfig {
            deconv: vec![(1, 1)],
            channels: 4,
            bottleneck: false,
            deconv_bias: false,
        };
        let store = ParamStore::new(1, DType::F64);
        let aie = Aie::new(&store.root(), &cfg, 2, 6, 3).unwrap();
        let x = randn(&[1, 7, 6], 8);
        let up = aie.upsample(&x).unwrap();
        assert_eq!(up.dims(), &[1, 7, 4]);
        let y2 = flat(&aie.upsample(&(&x * 2.0).unwrap()).unwrap());
        for (a, b) in flat(&up).iter().zip(y2) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
        let zero = aie.upsample(&Tensor::zeros((1, 7, 6), DType::F64, &Device::Cpu).unwrap()).unwrap();
        assert!(flat(&zero).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fuse_trims_pads_and_concatenates() {
        let y = randn(&[2, 10, 3], 1);
        let exact = randn(&[2, 10, 2], 2);
        assert_eq!(fuse(&y, &exact, None).unwrap().0.dims(), &[2, 10, 5]);
        let long = randn(&[2, 13, 2], 3);
        let (f, al) = fuse(&y, &long, None).unwrap();
        assert_eq!(al.upsampled_len - al.target_len, 3);
        assert_eq!(
            flat(&f.narrow(2, 3, 2).unwrap()),
            flat(&long.narrow(1, 0, 10).unwrap())
        );
        let short = randn(&[2, 8, 2], 4);
        let (f, _) = fuse(&y, &short, None).unwrap();
        let tail = flat(&f.narrow(1, 8, 2).unwrap().narrow(2, 3, 2).unwrap());
        assert!(tail.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_branch_with_bias_free_bottleneck_is_linear_in_y() {
        let store = ParamStore::new(2, DType::F64);
        let bn = Linear::new(&store.root().pp("bn"), 5, 3, false).unwrap();
        let y = randn(&[1, 6, 3], 1);
        let zeros = Tensor::zeros((1, 6, 2), DType::F64, &Device::Cpu).unwrap();
        let (a, _) = fuse(&y, &zeros, Some(&bn)).unwrap();
        let (b, _) = fuse(&(&y * -3.0).unwrap(), &zeros, Some(&bn)).unwrap();
        for (p, q) in flat(&a).iter().zip(flat(&b)) {
            assert!((-3.0 * p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn pad_and_mix_commute_with_scaling() {
        let store = ParamStore::new(3, DType::F64);
        let aie = Aie::new(&store.root(), &AieConfig::soundbeam(4), 3, 5, 2).unwrap();
        let stack = raw_stack(6, 5, 2, 11);
        let scaled = FeatureStack::new(
            stack.layers().iter().map(|z| (z * 2.5).unwrap()).collect(),
        )
        .unwrap();
        let a = flat(&aie.mix(&stack).unwrap());
        let b = flat(&aie.mix(&scaled).unwrap());
        for (p, q) in a.iter().zip(b) {
            assert!((2.5 * p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_override_reproduces_single_layer_deconv() {
        let store = ParamStore::new(4, DType::F64);
        let mut aie = Aie::new(&store.root(), &AieConfig::soundbeam(4), 3, 5, 2).unwrap();
        let w = aie.layer_weights().weights_vec().unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let stack = raw_stack(6, 5, 2, 12);
        let u = align_cls_pad(&stack).unwrap();
        for j in 0..3 {
            let mut hot = vec![0.0; 3];
            hot[j] = 1.0;
            aie.layer_weights_mut().set_override(Some(&hot)).unwrap();
            let got = flat(&aie.features(&stack).unwrap());
            let want = flat(&aie.upsample(&u.layers()[j]).unwrap());
            assert_eq!(got, want);
        }
        aie.layer_weights_mut().set_override(None).unwrap();
        assert!(aie.layer_weights_mut().set_override(Some(&[1.0])).is_err());
    }

    #[test]
    fn settled_positions_ignore_future_rows() {
        let cfg = AieConfig::waveformer(3);
        let store = ParamStore::new(5, DType::F64);
        let aie = Aie::new(&store.root(), &cfg, 1, 4, 2).unwrap();
        let x = randn(&[1, 9, 4], 1);
        let full = aie.upsample(&x).unwrap();
        for r in 1..9 {
            let part = aie.upsample(&x.narrow(1, 0, r).unwrap()).unwrap();
            let n = cfg.settled_len(r);
            assert_eq!(
                flat(&part.narrow(1, 0, n).unwrap()),
                flat(&full.narrow(1, 0, n).unwrap())
            );
        }
    }
}
