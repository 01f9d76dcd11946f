//! Single-pass CPU kernels with hand-written gradients for the hottest
//! elementwise layers. Built from primitive tensor ops these take a dozen
//! graph nodes each, which dominates training time at small widths.

use candle_core::{
    backend::BackendStorage, CpuStorage, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor,
    WithDType,
};

use crate::error::Result;

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("fused op expects contiguous input".into()))?;
    Ok(&s.as_slice::<T>()?[start..end])
}

fn host<T: WithDType>(t: &Tensor) -> candle_core::Result<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

fn unsupported(dtype: DType) -> candle_core::Error {
    candle_core::Error::Msg(format!("fused op: unsupported dtype {dtype:?}"))
}

/// Normalization over consecutive groups of `group` elements, with per-channel affine.
///
/// `group == channels` is layer norm over the last axis; `group == T * channels`
/// is global layer norm over a `[T, C]` item.
#[derive(Debug, Clone, Copy)]
struct GroupNorm {
    group: usize,
    channels: usize,
    eps: f64,
}

impl GroupNorm {
    fn stats<T: WithDType>(&self, x: &[T]) -> Vec<(f64, f64)> {
        x.chunks(self.group)
            .map(|g| {
                let n = g.len() as f64;
                let mean = g.iter().map(|v| v.to_f64()).sum::<f64>() / n;
                let var = g.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / n;
                (mean, 1.0 / (var + self.eps).sqrt())
            })
            .collect()
    }

    fn fwd<T: WithDType>(&self, x: &[T], gain: &[T], bias: &[T]) -> Vec<T> {
        let c = self.channels;
        let gain: Vec<f64> = gain.iter().map(|v| v.to_f64()).collect();
        let bias: Vec<f64> = bias.iter().map(|v| v.to_f64()).collect();
        let mut out = Vec::with_capacity(x.len());
        for (g, (mean, inv)) in x.chunks(self.group).zip(self.stats(x)) {
            for row in g.chunks(c) {
                for ((v, gn), b) in row.iter().zip(&gain).zip(&bias) {
                    out.push(T::from_f64((v.to_f64() - mean) * inv * gn + b));
                }
            }
        }
        out
    }

    fn bwd<T: WithDType>(&self, x: &[T], gain: &[T], dy: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let c = self.channels;
        let gain: Vec<f64> = gain.iter().map(|v| v.to_f64()).collect();
        let mut dx = Vec::with_capacity(x.len());
        let mut dg = vec![0.0f64; c];
        let mut db = vec![0.0f64; c];
        for ((g, d), (mean, inv)) in x
            .chunks(self.group)
            .zip(dy.chunks(self.group))
            .zip(self.stats(x))
        {
            let n = g.len() as f64;
            let mut sum_dh = 0.0;
            let mut sum_dh_xh = 0.0;
            for (row, drow) in g.chunks(c).zip(d.chunks(c)) {
                for ch in 0..row.len() {
                    let xh = (row[ch].to_f64() - mean) * inv;
                    let dv = drow[ch].to_f64();
                    dg[ch] += dv * xh;
                    db[ch] += dv;
                    let dh = dv * gain[ch];
                    sum_dh += dh;
                    sum_dh_xh += dh * xh;
                }
            }
            let (m1, m2) = (sum_dh / n, sum_dh_xh / n);
            for (row, drow) in g.chunks(c).zip(d.chunks(c)) {
                for ch in 0..row.len() {
                    let xh = (row[ch].to_f64() - mean) * inv;
                    let dh = drow[ch].to_f64() * gain[ch];
                    dx.push(T::from_f64(inv * (dh - m1 - xh * m2)));
                }
            }
        }
        let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect();
        (dx, cast(dg), cast(db))
    }
}

impl CustomOp3 for GroupNorm {
    fn name(&self) -> &'static str {
        "group-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s1.dtype() {
            DType::F32 => CpuStorage::F32(self.fwd::<f32>(
                contiguous(s1, l1)?,
                contiguous(s2, l2)?,
                contiguous(s3, l3)?,
            )),
            DType::F64 => CpuStorage::F64(self.fwd::<f64>(
                contiguous(s1, l1)?,
                contiguous(s2, l2)?,
                contiguous(s3, l3)?,
            )),
            d => return Err(unsupported(d)),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gain: &Tensor,
        _bias: &Tensor,
        _res: &Tensor,
        dy: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        fn run<T: WithDType>(
            op: &GroupNorm,
            x: &Tensor,
            gain: &Tensor,
            dy: &Tensor,
        ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
            let (dx, dg, db) = op.bwd::<T>(&host(x)?, &host(gain)?, &host(dy)?);
            Ok((
                Some(Tensor::from_vec(dx, x.shape(), x.device())?),
                Some(Tensor::from_vec(dg, gain.shape(), x.device())?),
                Some(Tensor::from_vec(db, gain.shape(), x.device())?),
            ))
        }
        match x.dtype() {
            DType::F32 => run::<f32>(self, x, gain, dy),
            DType::F64 => run::<f64>(self, x, gain, dy),
            d => Err(unsupported(d)),
        }
    }
}

/// Layer norm over the last axis of `x` with affine `gain`, `bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let c = x.dims().last().copied().unwrap_or(1);
    let op = GroupNorm {
        group: c,
        channels: c,
        eps,
    };
    Ok(x.contiguous()?.apply_op3(gain, bias, op)?)
}

/// Global layer norm of `x: [B, T, C]` (statistics per batch item).
pub fn global_layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let (_, t, c) = x.dims3()?;
    let op = GroupNorm {
        group: t * c,
        channels: c,
        eps,
    };
    Ok(x.contiguous()?.apply_op3(gain, bias, op)?)
}

/// Parametric ReLU with one slope per channel of the last axis.
#[derive(Debug, Clone, Copy)]
struct PReluOp {
    channels: usize,
}

impl CustomOp2 for PReluOp {
    fn name(&self) -> &'static str {
        "prelu"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        fn run<T: WithDType>(x: &[T], a: &[T], c: usize) -> Vec<T> {
            x.chunks(c)
                .flat_map(|row| {
                    row.iter().zip(a).map(|(&v, &al)| {
                        if v.to_f64() > 0.0 {
                            v
                        } else {
                            v * al
                        }
                    })
                })
                .collect()
        }
        let out = match s1.dtype() {
            DType::F32 => CpuStorage::F32(run::<f32>(
                contiguous(s1, l1)?,
                contiguous(s2, l2)?,
                self.channels,
            )),
            DType::F64 => CpuStorage::F64(run::<f64>(
                contiguous(s1, l1)?,
                contiguous(s2, l2)?,
                self.channels,
            )),
            d => return Err(unsupported(d)),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        alpha: &Tensor,
        _res: &Tensor,
        dy: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        fn run<T: WithDType>(
            c: usize,
            x: &Tensor,
            alpha: &Tensor,
            dy: &Tensor,
        ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
            let (xv, av, dv) = (host::<T>(x)?, host::<T>(alpha)?, host::<T>(dy)?);
            let mut dx = Vec::with_capacity(xv.len());
            let mut da = vec![0.0f64; c];
            for (i, (&v, &d)) in xv.iter().zip(&dv).enumerate() {
                let ch = i % c;
                if v.to_f64() > 0.0 {
                    dx.push(d);
                } else {
                    dx.push(d * av[ch]);
                    da[ch] += d.to_f64() * v.to_f64();
                }
            }
            let da: Vec<T> = da.into_iter().map(T::from_f64).collect();
            Ok((
                Some(Tensor::from_vec(dx, x.shape(), x.device())?),
                Some(Tensor::from_vec(da, alpha.shape(), x.device())?),
            ))
        }
        match x.dtype() {
            DType::F32 => run::<f32>(self.channels, x, alpha, dy),
            DType::F64 => run::<f64>(self.channels, x, alpha, dy),
            d => Err(unsupported(d)),
        }
    }
}

pub fn prelu(x: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    let c = alpha.elem_count();
    Ok(x.contiguous()?.apply_op2(alpha, PReluOp { channels: c })?)
}

/// Depthwise dilated convolution over time of `x: [B, T, C]` with `w: [K, C]`,
/// zero padding `pad_left`/`pad_right` frames.
#[derive(Debug, Clone, Copy)]
struct Depthwise {
    batch: usize,
    time: usize,
    channels: usize,
    kernel: usize,
    dilation: usize,
    pad_left: usize,
    out_len: usize,
}

impl Depthwise {
    /// Input frame read by output `t` through tap `j`, if inside the unpadded signal.
    #[inline]
    fn src(&self, t: usize, j: usize) -> Option<usize> {
        let p = t + j * self.dilation;
        (p >= self.pad_left && p - self.pad_left < self.time).then(|| p - self.pad_left)
    }

    fn fwd<T: WithDType>(&self, x: &[T], w: &[T]) -> Vec<T> {
        let c = self.channels;
        let mut out = vec![T::zero(); self.batch * self.out_len * c];
        for b in 0..self.batch {
            for t in 0..self.out_len {
                let o = &mut out[(b * self.out_len + t) * c..][..c];
                for j in 0..self.kernel {
                    if let Some(s) = self.src(t, j) {
                        let xi = &x[(b * self.time + s) * c..][..c];
                        let wj = &w[j * c..][..c];
                        for ((o, &xv), &wv) in o.iter_mut().zip(xi).zip(wj) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
        out
    }

    fn bwd<T: WithDType>(&self, x: &[T], w: &[T], dy: &[T]) -> (Vec<T>, Vec<T>) {
        let c = self.channels;
        let mut dx = vec![T::zero(); x.len()];
        let mut dw = vec![T::zero(); w.len()];
        for b in 0..self.batch {
            for t in 0..self.out_len {
                let d = &dy[(b * self.out_len + t) * c..][..c];
                for j in 0..self.kernel {
                    if let Some(s) = self.src(t, j) {
                        let base = (b * self.time + s) * c;
                        let wj = &w[j * c..][..c];
                        for ((g, &dv), &wv) in dx[base..base + c].iter_mut().zip(d).zip(wj) {
                            *g += dv * wv;
                        }
                        let xi = &x[base..base + c];
                        for ((g, &dv), &xv) in dw[j * c..(j + 1) * c].iter_mut().zip(d).zip(xi) {
                            *g += dv * xv;
                        }
                    }
                }
            }
        }
        (dx, dw)
    }
}

impl CustomOp2 for Depthwise {
    fn name(&self) -> &'static str {
        "depthwise-conv"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s1.dtype() {
            DType::F32 => CpuStorage::F32(self.fwd::<f32>(contiguous(s1, l1)?, contiguous(s2, l2)?)),
            DType::F64 => CpuStorage::F64(self.fwd::<f64>(contiguous(s1, l1)?, contiguous(s2, l2)?)),
            d => return Err(unsupported(d)),
        };
        Ok((out, Shape::from((self.batch, self.out_len, self.channels))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        dy: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        fn run<T: WithDType>(
            op: &Depthwise,
            x: &Tensor,
            w: &Tensor,
            dy: &Tensor,
        ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
            let (dx, dw) = op.bwd::<T>(&host(x)?, &host(w)?, &host(dy)?);
            Ok((
                Some(Tensor::from_vec(dx, x.shape(), x.device())?),
                Some(Tensor::from_vec(dw, w.shape(), x.device())?),
            ))
        }
        match x.dtype() {
            DType::F32 => run::<f32>(self, x, w, dy),
            DType::F64 => run::<f64>(self, x, w, dy),
            d => Err(unsupported(d)),
        }
    }
}

/// Fused form of [`super::depthwise_conv`].
pub fn depthwise(
    x: &Tensor,
    w: &Tensor,
    dilation: usize,
    pad_left: usize,
    pad_right: usize,
) -> Result<Tensor> {
    let (batch, time, channels) = x.dims3()?;
    let kernel = w.dim(0)?;
    let span = (kernel - 1) * dilation;
    let out_len = (time + pad_left + pad_right).checked_sub(span).ok_or(
        crate::error::Error::InputTooShort {
            what: "depthwise convolution",
            needed: span,
            got: time,
        },
    )?;
    let op = Depthwise {
        batch,
        time,
        channels,
        kernel,
        dilation,
        pad_left,
        out_len,
    };
    Ok(x.contiguous()?.apply_op2(&w.contiguous()?, op)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var, D};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn flat(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    fn close(a: &Tensor, b: &Tensor, tol: f64) {
        for (p, q) in flat(a).iter().zip(flat(b)) {
            assert!((p - q).abs() <= tol * (1.0 + q.abs()), "{p} vs {q}");
        }
    }

    fn reference_norm(x: &Tensor, g: &Tensor, b: &Tensor, global: bool) -> Tensor {
        let (mean, xc, var);
        if global {
            mean = x.mean_keepdim(D::Minus1).unwrap().mean_keepdim(D::Minus2).unwrap();
            xc = x.broadcast_sub(&mean).unwrap();
            var = xc.sqr().unwrap().mean_keepdim(D::Minus1).unwrap().mean_keepdim(D::Minus2).unwrap();
        } else {
            mean = x.mean_keepdim(D::Minus1).unwrap();
            xc = x.broadcast_sub(&mean).unwrap();
            var = xc.sqr().unwrap().mean_keepdim(D::Minus1).unwrap();
        }
        xc.broadcast_div(&(var + 1e-5).unwrap().sqrt().unwrap())
            .unwrap()
            .broadcast_mul(g)
            .unwrap()
            .broadcast_add(b)
            .unwrap()
    }

    /// Compares gradients of `sum(f(x, p) * probe)` between the fused and reference forms.
    fn grads_agree(
        fused: impl Fn(&Tensor, &Tensor, &Tensor) -> Tensor,
        reference: impl Fn(&Tensor, &Tensor, &Tensor) -> Tensor,
        shapes: [&[usize]; 3],
    ) {
        let vars: Vec<Var> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| Var::from_tensor(&randn(s, 10 + i as u64)).unwrap())
            .collect();
        let out = fused(vars[0].as_tensor(), vars[1].as_tensor(), vars[2].as_tensor());
        let probe = randn(out.dims(), 99);
        let l1 = (&out * &probe).unwrap().sum_all().unwrap();
        let g1 = l1.backward().unwrap();
        let out2 = reference(vars[0].as_tensor(), vars[1].as_tensor(), vars[2].as_tensor());
        close(&out, &out2, 1e-10);
        let l2 = (&out2 * &probe).unwrap().sum_all().unwrap();
        let g2 = l2.backward().unwrap();
        for v in &vars {
            if let (Some(a), Some(b)) = (g1.get(v.as_tensor()), g2.get(v.as_tensor())) {
                close(a, b, 1e-9);
            }
        }
    }

    #[test]
    fn layer_norm_matches_composed_ops() {
        grads_agree(
            |x, g, b| layer_norm(x, g, b, 1e-5).unwrap(),
            |x, g, b| reference_norm(x, g, b, false),
            [&[2, 5, 6], &[6], &[6]],
        );
    }

    #[test]
    fn global_norm_matches_composed_ops() {
        grads_agree(
            |x, g, b| global_layer_norm(x, g, b, 1e-5).unwrap(),
            |x, g, b| reference_norm(x, g, b, true),
            [&[3, 4, 5], &[5], &[5]],
        );
    }

    #[test]
    fn prelu_matches_composed_ops() {
        grads_agree(
            |x, a, _| prelu(x, a).unwrap(),
            |x, a, _| (x.relu().unwrap() - x.neg().unwrap().relu().unwrap().broadcast_mul(a).unwrap()).unwrap(),
            [&[2, 7, 4], &[4], &[1]],
        );
    }

    #[test]
    fn depthwise_matches_composed_ops() {
        for (d, pl, pr) in [(1, 1, 1), (2, 4, 0), (4, 0, 0), (3, 6, 6)] {
            grads_agree(
                |x, w, _| depthwise(x, w, d, pl, pr).unwrap(),
                |x, w, _| super::super::depthwise_conv_composed(x, w, d, pl, pr).unwrap(),
                [&[2, 13, 3], &[3, 3], &[1]],
            );
        }
    }
}
