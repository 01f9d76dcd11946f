//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! `cargo test -p tseforge --test acceptance -- 3 7` runs a subset.

use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use tseforge::aie::{align_cls_pad, Aie, AieConfig};
use tseforge::clue::{ClueKind, ClueSpec, Mhfa, MhfaConfig};
use tseforge::evalkit::{evaluate_samples, failure_rate, snri, FAILURE_THRESHOLD_DB};
use tseforge::m2d::{token_count, EncoderMode, FeatureStack};
use tseforge::mixsim::{Manifest, MixConfig, MixtureSample, SourceBank};
use tseforge::model::{ModelConfig, TseModel};
use tseforge::nn::ParamStore;
use tseforge::signal::{logmel, Waveform};
use tseforge::trainer::{
    fit_with, multitask_step, path_losses, si_snr_loss, si_snr_loss_t, snr_loss, snr_loss_t, Batch,
    LossConfig, OptimConfig, Paths, TrainConfig, Trainer,
};
use tseforge::Result;

const SR: u32 = 16000;

type Outcome = Result<(bool, String)>;

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn wave(v: &[f64]) -> Waveform {
    Waveform::new(v.iter().map(|&x| x as f32).collect(), SR).unwrap()
}

fn max_abs(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

fn mean_snri(model: &TseModel, samples: &[MixtureSample], kind: ClueKind) -> Result<f64> {
    let r = evaluate_samples(model, samples, kind)?;
    Ok(r.iter().map(|m| m.snri_db).sum::<f64>() / r.len() as f64)
}

fn toy_train(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        steps,
        batch_size: 4,
        crop_s: 0.25,
        valid_every: 0,
        optim: OptimConfig { lr: 5e-4, grad_clip: 5.0 },
        ..TrainConfig::default()
    }
}

// 1: overfit a toy SoundBeam on 16 fixed mixtures
fn overfit() -> Outcome {
    let t0 = Instant::now();
    let bank = SourceBank::toy(4)?;
    let train = Manifest::generate(&bank, &MixConfig::default(), 16, 1)?.realize_all()?;
    let model = TseModel::new(&ModelConfig::preset("soundbeam-baseline", 4)?, 0, DType::F32)?;
    let steps = 1000;
    let out = fit_with(model, &train, &train[..2], &toy_train(steps, 0), None)?;
    let label = mean_snri(&out.model, &train, ClueKind::ClassLabel)?;
    let enroll = mean_snri(&out.model, &train, ClueKind::Enrollment)?;
    let took = t0.elapsed();
    let ok = label >= 5.0 && enroll >= 3.0 && took <= Duration::from_secs(20 * 60);
    Ok((
        ok,
        format!(
            "{steps} steps, train SNRi label {label:.2} dB (>= 5), enrollment {enroll:.2} dB (>= 3), {:.0} s (<= 1200)",
            took.as_secs_f64()
        ),
    ))
}

// 2: encoder fusion is not worse than the baseline with enrollment clues
const FUSION_STEPS: usize = 500;

fn fusion_direction() -> Outcome {
    let bank = SourceBank::toy(4)?;
    let data = Manifest::generate(&bank, &MixConfig::default(), 64, 2)?.realize_all()?;
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in 0..3u64 {
        let mut res = [0.0; 2];
        for (i, preset) in ["soundbeam-baseline", "soundbeam-m2d-full"].iter().enumerate() {
            let model = TseModel::new(&ModelConfig::preset(preset, 4)?, seed, DType::F32)?;
            // validation only runs after the last step here, so a small slice suffices
            let out = fit_with(model, &data, &data[..2], &toy_train(FUSION_STEPS, seed), None)?;
            res[i] = mean_snri(&out.model, &data, ClueKind::Enrollment)?;
        }
        ok &= res[1] >= res[0] - 0.5;
        lines.push(format!("seed {seed}: baseline {:.2}, fused {:.2}", res[0], res[1]));
    }
    Ok((ok, format!("enrollment SNRi, {FUSION_STEPS} steps; {}", lines.join("; "))))
}

fn small_batch(seed: u64, n: usize, duration_s: f64) -> Result<Batch> {
    let bank = SourceBank::toy(4)?;
    let cfg = MixConfig {
        duration_s,
        enrollment_s: duration_s,
        ..MixConfig::default()
    };
    let samples = Manifest::generate(&bank, &cfg, n, seed)?.realize_all()?;
    Ok(Batch::from_samples(&samples))
}

// 3: combined loss is the affine mix of the separately computed path losses
fn alpha_endpoints() -> Outcome {
    let model = TseModel::new(&ModelConfig::preset("soundbeam-m2d-full", 4)?, 3, DType::F64)?;
    let batch = small_batch(5, 2, 0.5)?;
    let only = |label: bool| -> Result<f64> {
        let pl = path_losses(&model, &batch, &LossConfig::default(), Paths { label, enroll: !label })?;
        let (l, e) = pl.values()?;
        Ok(l.or(e).unwrap())
    };
    let (l_label, l_enroll) = (only(true)?, only(false)?);
    let mut worst = 0.0f64;
    for alpha in [0.0, 0.5, 1.0] {
        let cfg = LossConfig { alpha, ..LossConfig::default() };
        let both = path_losses(&model, &batch, &cfg, Paths::BOTH)?;
        let measured = both.combine(alpha)?.to_scalar::<f64>()?;
        let want = alpha * l_label + (1.0 - alpha) * l_enroll;
        worst = worst.max((measured - want).abs());
    }
    Ok((
        worst <= 1e-6,
        format!("label {l_label:.4}, enrollment {l_enroll:.4}, max deviation {worst:.2e} (<= 1e-6)"),
    ))
}

// 4: layer weights stay on the simplex; one-hot override selects a single layer
fn simplex() -> Outcome {
    let mut model = TseModel::new(&ModelConfig::preset("soundbeam-m2d-full", 4)?, 4, DType::F32)?;
    let mut trainer = Trainer::new(&mut model, &OptimConfig { lr: 1e-2, grad_clip: 5.0 }, true)?;
    let batches: Vec<Batch> = (0..4).map(|i| small_batch(100 + i, 2, 0.25)).collect::<Result<_>>()?;
    let mut worst = 0.0f64;
    let steps = 500;
    let mut moved = 0.0f64;
    for step in 0..steps {
        multitask_step(&model, &mut trainer, &batches[step % batches.len()], &LossConfig::default(), None)?;
        let aie = model.aie_weights()?.unwrap();
        let (k, v) = model.mhfa_weights()?.unwrap();
        for w in [&aie, &k, &v] {
            worst = worst.max((w.iter().sum::<f64>() - 1.0).abs());
            if w.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                worst = f64::INFINITY;
            }
        }
        moved = aie.iter().map(|w| (w - 1.0 / aie.len() as f64).abs()).fold(moved, f64::max);
    }

    let mix = wave(&randn(&mut ChaCha8Rng::seed_from_u64(9), 16000));
    let stack = model.m2d().unwrap().encode_waveforms(&[mix], EncoderMode::Offline)?;
    let padded = align_cls_pad(&stack)?;
    let n = padded.len();
    let aie = model.aie_mut().unwrap();
    let mut override_err = 0.0f64;
    for j in 0..n {
        let mut hot = vec![0.0; n];
        hot[j] = 1.0;
        aie.layer_weights_mut().set_override(Some(&hot))?;
        let got = flat(&aie.features(&stack)?);
        let want = flat(&aie.upsample(&padded.layers()[j])?);
        override_err = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(override_err, f64::max);
    }
    aie.layer_weights_mut().set_override(None)?;
    Ok((
        worst <= 1e-6 && override_err <= 1e-6,
        format!(
            "{steps} steps, max |sum - 1| {worst:.2e}, largest weight shift {moved:.3}, one-hot override error {override_err:.2e}"
        ),
    ))
}

// 5: prefix perturbation and chunked streaming
fn causality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 16000;
    let x: Vec<f64> = randn(&mut rng, n).iter().map(|v| v * 0.2).collect();
    let cut = 9000;
    let mut y = x.clone();
    for v in y.iter_mut().skip(cut) {
        *v = -0.5 * *v + 0.05;
    }
    let (a, b) = (wave(&x), wave(&y));
    let mut notes = Vec::new();
    let mut ok = true;

    let model = TseModel::new(&ModelConfig::preset("waveformer-m2d-full", 4)?, 6, DType::F32)?;
    let cfg = model.config().clone();

    // encoder: token k reads samples up to 320 k + 359
    let enc = model.m2d().unwrap();
    let sa = enc.encode_waveforms(std::slice::from_ref(&a), EncoderMode::Causal)?;
    let sb = enc.encode_waveforms(std::slice::from_ref(&b), EncoderMode::Causal)?;
    let settled = (cut - 359) / 320;
    let mut enc_err = 0.0f32;
    let mut enc_future = 0.0f32;
    for (l, (za, zb)) in sa.layers().iter().zip(sb.layers()).enumerate() {
        let rows = if l == 0 { settled } else { settled + 1 };
        let pa: Vec<f32> = za.narrow(1, 0, rows)?.flatten_all()?.to_vec1()?;
        let pb: Vec<f32> = zb.narrow(1, 0, rows)?.flatten_all()?.to_vec1()?;
        enc_err = enc_err.max(max_abs(&pa, &pb));
        let fa: Vec<f32> = za.flatten_all()?.to_vec1()?;
        let fb: Vec<f32> = zb.flatten_all()?.to_vec1()?;
        enc_future = enc_future.max(max_abs(&fa, &fb));
    }
    ok &= enc_err <= 1e-6 && enc_future > 1e-6;
    notes.push(format!("encoder prefix {enc_err:.1e}"));

    let look = cfg.waveformer.lookahead_samples();
    let safe = cut - look;
    for name in ["waveformer-baseline", "waveformer-m2d-full"] {
        let m = TseModel::new(&ModelConfig::preset(name, 4)?, 6, DType::F32)?;
        let clue = ClueSpec::label(1);
        let oa = m.extract(&a, &clue)?;
        let ob = m.extract(&b, &clue)?;
        let prefix = max_abs(&oa.samples()[..safe], &ob.samples()[..safe]);
        ok &= prefix <= 1e-6;
        let mut stream_err = 0.0f32;
        let stride = m.config().waveformer.stride;
        for chunk in [stride, 4 * stride, 32 * stride] {
            let s = m.extract_streaming(&a, &clue, chunk)?;
            ok &= s.len() == oa.len();
            stream_err = stream_err.max(max_abs(s.samples(), oa.samples()));
        }
        ok &= stream_err <= 1e-4;
        notes.push(format!("{name}: prefix {prefix:.1e}, streaming {stream_err:.1e}"));
    }
    Ok((ok, format!("lookahead {look} samples; {}", notes.join("; "))))
}

// 6: frame-rate contract
fn frame_rates() -> Outcome {
    let w = Waveform::zeros(6 * SR as usize, SR);
    let w = Waveform::new(
        w.samples().iter().enumerate().map(|(i, _)| ((i as f32) * 0.05).sin() * 0.1).collect(),
        SR,
    )?;
    let mel = logmel(&w)?;
    let model = TseModel::new(&ModelConfig::preset("soundbeam-m2d-full", 4)?, 7, DType::F32)?;
    let cfg = model.config();
    let tokens = token_count(mel.n_frames(), &cfg.m2d)?;
    let stack = model.m2d().unwrap().encode_waveforms(std::slice::from_ref(&w), EncoderMode::Offline)?;
    let rows = stack.layers()[1].dim(1)?;
    let aie = model.aie().unwrap();
    let up = aie.features(&stack)?.dim(1)?;
    let enc_len = cfg.soundbeam.frames(w.len()).unwrap();
    let y = Tensor::zeros((1, enc_len, cfg.soundbeam.filters), DType::F32, &Device::Cpu)?;
    let (fused, align) = aie.fuse(&y, &aie.features(&stack)?)?;
    let ok = mel.n_frames() == 600
        && tokens == 300
        && rows == 301
        && aie.config().total_stride() == 40
        && up == aie.config().upsampled_len(301)
        && up >= enc_len
        && align.target_len == enc_len
        && fused.dim(1)? == enc_len
        && enc_len == (w.len() - cfg.soundbeam.kernel) / cfg.soundbeam.stride + 1;
    Ok((
        ok,
        format!(
            "{} frames, {tokens} tokens + class token, x{} upsampling: {up} -> {enc_len} encoder frames",
            mel.n_frames(),
            aie.config().total_stride()
        ),
    ))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let n: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    d / n.max(1e-12)
}

fn var(v: &[f64], shape: &[usize]) -> Var {
    Var::from_tensor(&Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()).unwrap()
}

// gradient of `f` at `v` by autograd and by central differences on `coords`
fn grad_check(v: &Var, coords: &[usize], f: &dyn Fn() -> Result<Tensor>) -> Result<f64> {
    let loss = f()?;
    let g = flat(&loss.backward()?.get(v).expect("gradient").clone());
    let base = flat(v.as_tensor());
    let shape = v.dims().to_vec();
    let h = 1e-6;
    let mut fd = Vec::with_capacity(coords.len());
    let mut ga = Vec::with_capacity(coords.len());
    for &i in coords {
        let mut p = base.clone();
        p[i] += h;
        v.set(&Tensor::from_vec(p.clone(), shape.as_slice(), &Device::Cpu)?)?;
        let up = f()?.to_scalar::<f64>()?;
        p[i] -= 2.0 * h;
        v.set(&Tensor::from_vec(p, shape.as_slice(), &Device::Cpu)?)?;
        let down = f()?.to_scalar::<f64>()?;
        fd.push((up - down) / (2.0 * h));
        ga.push(g[i]);
    }
    v.set(&Tensor::from_vec(base, shape.as_slice(), &Device::Cpu)?)?;
    Ok(rel_err(&ga, &fd))
}

// 7: loss oracles and gradient checks
fn loss_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 256;

    let mut scale_err = 0.0f64;
    for _ in 0..20 {
        let r = randn(&mut rng, n);
        let e: Vec<f64> = r.iter().map(|v| v + 0.7 * randn(&mut rng, 1)[0]).collect();
        let base = si_snr_loss(&wave(&e), &wave(&r))?;
        for c in [0.01, 0.5, 3.0, 100.0] {
            let scaled: Vec<f64> = e.iter().map(|v| v * c).collect();
            scale_err = scale_err.max((si_snr_loss(&wave(&scaled), &wave(&r))? - base).abs());
        }
    }

    let mut snr_err = 0.0f64;
    for _ in 0..20 {
        let r = randn(&mut rng, n);
        let noise = randn(&mut rng, n);
        let er: f64 = r.iter().map(|v| v * v).sum();
        let en: f64 = noise.iter().map(|v| v * v).sum();
        let k = (er / 10.0 / en).sqrt();
        let e: Vec<f64> = r.iter().zip(&noise).map(|(a, b)| a + k * b).collect();
        let rt = Tensor::from_vec(r.clone(), (1, n), &Device::Cpu)?;
        let et = Tensor::from_vec(e, (1, n), &Device::Cpu)?;
        let l = snr_loss_t(&et, &rt)?.to_vec1::<f64>()?[0];
        snr_err = snr_err.max((l + 10.0).abs());
        // f32 path
        let l32 = snr_loss(&wave(&flat(&et)), &wave(&r))?;
        snr_err = snr_err.max((l32 + 10.0).abs());
    }

    let mut grad_err = 0.0f64;
    let m = 48;
    let coords: Vec<usize> = (0..m).collect();
    for i in 0..20 {
        let r = Tensor::from_vec(randn(&mut rng, m), (1, m), &Device::Cpu)?;
        let e0: Vec<f64> = flat(&r).iter().map(|v| v + 0.5 * randn(&mut rng, 1)[0]).collect();
        let e = var(&e0, &[1, m]);
        let loss = |si: bool| {
            let (e, r) = (e.clone(), r.clone());
            move || -> Result<Tensor> {
                let t = if si { si_snr_loss_t(e.as_tensor(), &r)? } else { snr_loss_t(e.as_tensor(), &r)? };
                Ok(t.sum_all()?)
            }
        };
        grad_err = grad_err.max(grad_check(&e, &coords, &loss(i % 2 == 0))?);
        grad_err = grad_err.max(grad_check(&e, &coords, &loss(i % 2 == 1))?);
    }

    let mut mhfa_err = 0.0f64;
    for i in 0..20u64 {
        let store = ParamStore::new(100 + i, DType::F64);
        let cfg = MhfaConfig { heads: 2, head_dim: 4, pool_cls: true };
        let (layers, t, d) = (3, 5 + i as usize % 4, 6);
        let mhfa = Mhfa::new(&store.root().pp("mhfa"), &cfg, layers, d, 4)?;
        let mut vars = vec![var(&randn(&mut rng, t * d), &[1, t, d])];
        for _ in 1..layers {
            vars.push(var(&randn(&mut rng, (t + 1) * d), &[1, t + 1, d]));
        }
        for (name, v) in store.vars() {
            if name.contains("logits") {
                let w = randn(&mut rng, layers);
                v.set(&Tensor::from_vec(w, layers, &Device::Cpu)?)?;
            }
        }
        let probe = Tensor::from_vec(randn(&mut rng, 4), (1, 4), &Device::Cpu)?;
        let f = || -> Result<Tensor> {
            let stack = FeatureStack::new(vars.iter().map(|v| v.as_tensor().clone()).collect())?;
            Ok((mhfa.forward(&stack, None)? * &probe)?.sum_all()?)
        };
        let pick = |len: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
            (0..8).map(|_| rng.random_range(0..len)).collect()
        };
        for v in &vars {
            let c = pick(v.elem_count(), &mut rng);
            mhfa_err = mhfa_err.max(grad_check(v, &c, &f)?);
        }
        for (name, v) in store.vars() {
            let c = if name.contains("logits") {
                (0..layers).collect()
            } else {
                pick(v.elem_count(), &mut rng)
            };
            mhfa_err = mhfa_err.max(grad_check(&v, &c, &f)?);
        }
    }

    let ok = scale_err <= 1e-6 && snr_err <= 0.01 && grad_err <= 1e-3 && mhfa_err <= 1e-3;
    Ok((
        ok,
        format!(
            "scale invariance {scale_err:.1e}, 10 dB pairs {snr_err:.1e} dB, loss gradients {grad_err:.1e}, MHFA gradients {mhfa_err:.1e} (relative)"
        ),
    ))
}

// 8: metric oracles
fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut v: Vec<f64> = (0..1000).map(|_| rng.random_range(-5.0..10.0)).collect();
    v[0] = FAILURE_THRESHOLD_DB;
    v[1] = FAILURE_THRESHOLD_DB - 1e-12;
    let mut bad = 0usize;
    for x in &v {
        if *x < 1.0 {
            bad += 1;
        }
    }
    let fr = failure_rate(&v)?;
    let want = bad as f64 * 100.0 / 1000.0;
    let mut snri_max = 0.0f64;
    for _ in 0..20 {
        let mix = wave(&randn(&mut rng, 4000));
        let r = wave(&randn(&mut rng, 4000));
        snri_max = snri_max.max(snri(&mix, &r, &mix)?.abs());
    }
    Ok((
        fr == want && snri_max == 0.0,
        format!("failure rate {fr}% vs counted {want}%, max |snri(mix, ref, mix)| {snri_max}"),
    ))
}

// 9: class-token alignment for every length up to 300 patches
fn cls_alignment() -> Outcome {
    let store = ParamStore::new(9, DType::F32);
    let (layers, d) = (3, 16);
    let mhfa = Mhfa::new(&store.root().pp("mhfa"), &MhfaConfig::default(), layers, d, 8)?;
    let aie = Aie::new(&store.root().pp("aie"), &AieConfig::soundbeam(8), layers, d, 12)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut zero_row = true;
    let mut shapes = true;
    for t in 1..=300usize {
        let mut ls = vec![Tensor::from_vec(
            randn(&mut rng, t * d).iter().map(|&v| v as f32).collect::<Vec<_>>(),
            (1, t, d),
            &Device::Cpu,
        )?];
        for _ in 1..layers {
            ls.push(Tensor::from_vec(
                randn(&mut rng, (t + 1) * d).iter().map(|&v| v as f32).collect::<Vec<_>>(),
                (1, t + 1, d),
                &Device::Cpu,
            )?);
        }
        let stack = FeatureStack::new(ls)?;
        let padded = align_cls_pad(&stack)?;
        zero_row &= padded.layers()[0].narrow(1, 0, 1)?.abs()?.max_all()?.to_scalar::<f32>()? == 0.0;
        shapes &= padded.layers().iter().all(|z| z.dims() == [1, t + 1, d]);
        let e = mhfa.forward(&stack, None)?;
        shapes &= e.dims() == [1, 8];
        let frames = (t * 320 - 16) / 8 + 1;
        let y = Tensor::zeros((1, frames, 12), DType::F32, &Device::Cpu)?;
        let (fused, _) = aie.forward(&y, &stack)?;
        shapes &= fused.dims() == [1, frames, 20];
    }
    Ok((
        zero_row && shapes,
        format!("lengths 1..=300 patches: zero pad row {zero_row}, shapes consistent {shapes}"),
    ))
}

// 10: mixture identity and calibrated corpus SNR
fn mixture_identity() -> Outcome {
    let bank = SourceBank::toy(8)?;
    let cfg = MixConfig::default();
    let manifest = Manifest::generate(&bank, &cfg, 500, 2024)?;
    let mut worst = 0.0f32;
    let mut snr = 0.0;
    for i in 0..manifest.len() {
        let s = manifest.realize(i)?;
        worst = worst.max(s.identity_residual());
        snr += s.mixture_snr_db()?;
    }
    snr /= manifest.len() as f64;
    Ok((
        worst <= 1e-6 && (snr + 0.4).abs() <= 0.5,
        format!("max identity residual {worst:.1e}, corpus mixture SNR {snr:.2} dB (target -0.40 +/- 0.5)"),
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("overfit sanity", overfit),
        ("encoder fusion direction", fusion_direction),
        ("multitask loss endpoints", alpha_endpoints),
        ("layer-weight simplex", simplex),
        ("causality and streaming", causality),
        ("frame-rate contract", frame_rates),
        ("loss oracles", loss_oracles),
        ("metric oracles", metric_oracles),
        ("class-token alignment", cls_alignment),
        ("mixture identity", mixture_identity),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let (ok, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {n:>2} {name}: {} ({detail}) [{:.1} s]",
            if ok { "PASS" } else { "FAIL" },
            t0.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
