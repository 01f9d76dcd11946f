//! Synthetic mixture generation: a bank of parameterized sound classes,
//! reverberant event mixing over background noise, enrollment sampling and manifests.

use std::f64::consts::PI;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{Waveform, SAMPLE_RATE};

const FS: f64 = SAMPLE_RATE as f64;
/// Peak level the limiter scales to when anything would clip.
pub const LIMIT: f32 = 0.99;

pub const MANIFEST_FORMAT: &str = "tseforge-manifest-v1";

/// Generator of one sound class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ClassSource {
    /// Harmonic tone switched on and off in notes.
    Tone { f0: f64, harmonics: usize },
    /// Repeating linear frequency sweep.
    Chirp { f_lo: f64, f_hi: f64, period_s: f64 },
    /// Band-limited noise with a slow amplitude modulation.
    BandNoise { f_lo: f64, f_hi: f64 },
    /// Irregular train of short resonant clicks.
    ClickTrain { rate_hz: f64, resonance_hz: f64 },
    /// Random crops of 16 kHz WAV files.
    Files { paths: Vec<PathBuf> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoundClass {
    pub name: String,
    pub source: ClassSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceBank {
    classes: Vec<SoundClass>,
}

impl SourceBank {
    pub fn new(classes: Vec<SoundClass>) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::Config("a source bank needs at least two classes".into()));
        }
        for c in &classes {
            if let ClassSource::Files { paths } = &c.source {
                if paths.is_empty() {
                    return Err(Error::Config(format!("class {:?} lists no files", c.name)));
                }
            }
        }
        Ok(Self { classes })
    }

    /// The first `n` (2..=8) built-in synthetic classes.
    pub fn toy(n: usize) -> Result<Self> {
        let all = [
            ("tone", ClassSource::Tone { f0: 440.0, harmonics: 3 }),
            ("chirp", ClassSource::Chirp { f_lo: 1200.0, f_hi: 2400.0, period_s: 0.5 }),
            ("hiss", ClassSource::BandNoise { f_lo: 4000.0, f_hi: 6500.0 }),
            ("clicks", ClassSource::ClickTrain { rate_hz: 10.0, resonance_hz: 2800.0 }),
            ("hum", ClassSource::Tone { f0: 110.0, harmonics: 5 }),
            ("murmur", ClassSource::BandNoise { f_lo: 600.0, f_hi: 1000.0 }),
            ("whistle", ClassSource::Tone { f0: 3200.0, harmonics: 1 }),
            ("sweep", ClassSource::Chirp { f_lo: 300.0, f_hi: 800.0, period_s: 1.5 }),
        ];
        if !(2..=all.len()).contains(&n) {
            return Err(Error::Config(format!("toy bank has 2..={} classes, asked for {n}", all.len())));
        }
        Self::new(
            all.into_iter()
                .take(n)
                .map(|(name, source)| SoundClass {
                    name: name.into(),
                    source,
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[SoundClass] {
        &self.classes
    }

    pub fn class(&self, id: usize) -> Result<&SoundClass> {
        self.classes.get(id).ok_or(Error::UnknownClass(id))
    }

    /// Dry instance `seed` of class `class_id`, normalized to unit peak.
    pub fn synth_source(&self, class_id: usize, duration_s: f64, seed: u64) -> Result<Waveform> {
        let class = self.class(class_id)?;
        let n = n_samples(duration_s)?;
        let mut rng = rng_for(&[0x5eed, class_id as u64, seed]);
        let x = match &class.source {
            ClassSource::Tone { f0, harmonics } => tone(&mut rng, n, *f0, *harmonics),
            ClassSource::Chirp { f_lo, f_hi, period_s } => chirp(&mut rng, n, *f_lo, *f_hi, *period_s),
            ClassSource::BandNoise { f_lo, f_hi } => band_noise(&mut rng, n, *f_lo, *f_hi),
            ClassSource::ClickTrain { rate_hz, resonance_hz } => clicks(&mut rng, n, *rate_hz, *resonance_hz),
            ClassSource::Files { paths } => from_files(&mut rng, n, paths)?,
        };
        Waveform::new(normalize_peak(x, 1.0), SAMPLE_RATE)
    }
}

fn n_samples(duration_s: f64) -> Result<usize> {
    let n = (duration_s * FS).round();
    if !(n >= 1.0) || !n.is_finite() {
        return Err(Error::Config(format!("invalid duration {duration_s} s")));
    }
    Ok(n as usize)
}

/// Mixes a list of words into one 64-bit seed (splitmix64 steps).
pub fn mix_seed(words: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &w in words {
        h ^= w;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// Seed of mixture `index` in epoch `epoch` of an on-the-fly stream.
pub fn stream_seed(base: u64, epoch: u64, index: u64) -> u64 {
    mix_seed(&[0x57ea, base, epoch, index])
}

fn rng_for(words: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(words))
}

fn normalize_peak(mut x: Vec<f64>, peak: f64) -> Vec<f32> {
    let m = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m > 0.0 {
        x.iter_mut().for_each(|v| *v *= peak / m);
    }
    x.into_iter().map(|v| v as f32).collect()
}

/// On/off gate with 10 ms raised-cosine ramps; segments alternate randomly.
fn gate(rng: &mut ChaCha8Rng, n: usize, on: (f64, f64), off: (f64, f64)) -> Vec<f64> {
    let ramp = (0.01 * FS) as usize;
    let mut g = vec![0.0; n];
    let mut t = (rng.random_range(0.0..off.1) * FS) as usize;
    while t < n {
        let len = (rng.random_range(on.0..on.1) * FS) as usize;
        let end = (t + len).min(n);
        for (i, v) in g[t..end].iter_mut().enumerate() {
            let from_start = i;
            let to_end = end - t - 1 - i;
            let r = from_start.min(to_end);
            *v = if r >= ramp {
                1.0
            } else {
                0.5 - 0.5 * (PI * r as f64 / ramp as f64).cos()
            };
        }
        t = end + (rng.random_range(off.0..off.1) * FS) as usize;
    }
    if g.iter().all(|&v| v == 0.0) {
        g.iter_mut().for_each(|v| *v = 1.0);
    }
    g
}

fn tone(rng: &mut ChaCha8Rng, n: usize, f0: f64, harmonics: usize) -> Vec<f64> {
    let f = f0 * rng.random_range(0.94..1.06);
    let amps: Vec<f64> = (0..harmonics.max(1))
        .map(|h| rng.random_range(0.5..1.0) / (h + 1) as f64)
        .collect();
    let phases: Vec<f64> = amps.iter().map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let vib = rng.random_range(3.0..6.0);
    let depth = rng.random_range(0.0..0.01);
    let g = gate(rng, n, (0.25, 1.2), (0.05, 0.5));
    let mut phase = 0.0;
    (0..n)
        .map(|i| {
            let t = i as f64 / FS;
            phase += 2.0 * PI * f * (1.0 + depth * (2.0 * PI * vib * t).sin()) / FS;
            let s: f64 = amps
                .iter()
                .zip(&phases)
                .enumerate()
                .map(|(h, (a, p))| a * ((h + 1) as f64 * phase + p).sin())
                .sum();
            s * g[i]
        })
        .collect()
}

fn chirp(rng: &mut ChaCha8Rng, n: usize, f_lo: f64, f_hi: f64, period_s: f64) -> Vec<f64> {
    let lo = f_lo * rng.random_range(0.92..1.08);
    let hi = f_hi * rng.random_range(0.92..1.08);
    let period = period_s * rng.random_range(0.8..1.2);
    let up = rng.random_bool(0.5);
    let g = gate(rng, n, (0.6, 2.0), (0.1, 0.6));
    let mut phase = rng.random_range(0.0..2.0 * PI);
    (0..n)
        .map(|i| {
            let frac = (i as f64 / FS / period).fract();
            let frac = if up { frac } else { 1.0 - frac };
            phase += 2.0 * PI * (lo + (hi - lo) * frac) / FS;
            phase.sin() * g[i]
        })
        .collect()
}

/// Zero-phase filtering by a frequency response sampled on the FFT grid.
fn fft_filter(x: &[f64], response: impl Fn(f64) -> f64) -> Vec<f64> {
    let n = x.len();
    let mut planner = RealFftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut buf = x.to_vec();
    let mut spec = fwd.make_output_vec();
    fwd.process(&mut buf, &mut spec).expect("fft sizes");
    for (k, c) in spec.iter_mut().enumerate() {
        *c *= response(k as f64 * FS / n as f64) / n as f64;
    }
    // the inverse needs purely real DC and Nyquist bins
    spec[0].im = 0.0;
    if n.is_multiple_of(2) {
        spec[n / 2].im = 0.0;
    }
    let mut out = inv.make_output_vec();
    inv.process(&mut spec, &mut out).expect("fft sizes");
    out
}

/// Linear convolution truncated to the length of `x`.
fn fft_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    let n = (x.len() + h.len() - 1).next_power_of_two();
    let mut planner = RealFftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut a = x.to_vec();
    a.resize(n, 0.0);
    let mut b = h.to_vec();
    b.resize(n, 0.0);
    let mut sa = fwd.make_output_vec();
    let mut sb = fwd.make_output_vec();
    fwd.process(&mut a, &mut sa).expect("fft sizes");
    fwd.process(&mut b, &mut sb).expect("fft sizes");
    for (p, q) in sa.iter_mut().zip(&sb) {
        *p = *p * q / n as f64;
    }
    let mut out = inv.make_output_vec();
    inv.process(&mut sa, &mut out).expect("fft sizes");
    out.truncate(x.len());
    out
}

fn white(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn band_noise(rng: &mut ChaCha8Rng, n: usize, f_lo: f64, f_hi: f64) -> Vec<f64> {
    let shift = rng.random_range(0.93..1.07);
    let (lo, hi) = (f_lo * shift, f_hi * shift);
    let w = white(rng, n);
    let y = fft_filter(&w, |f| if f >= lo && f <= hi { 1.0 } else { 0.0 });
    let rate = rng.random_range(1.0..3.0);
    let p = rng.random_range(0.0..2.0 * PI);
    let g = gate(rng, n, (0.4, 1.5), (0.1, 0.5));
    y.iter()
        .enumerate()
        .map(|(i, v)| v * g[i] * (0.75 + 0.25 * (2.0 * PI * rate * i as f64 / FS + p).sin()))
        .collect()
}

fn clicks(rng: &mut ChaCha8Rng, n: usize, rate_hz: f64, resonance_hz: f64) -> Vec<f64> {
    let rate = rate_hz * rng.random_range(0.8..1.25);
    let fr = resonance_hz * rng.random_range(0.93..1.07);
    let decay = rng.random_range(0.002..0.005) * FS;
    let len = (6.0 * decay) as usize;
    let g = gate(rng, n, (0.5, 2.0), (0.1, 0.6));
    let mut x = vec![0.0; n];
    let mut t = rng.random_range(0.0..1.0 / rate) * FS;
    while (t as usize) < n {
        let start = t as usize;
        let amp = rng.random_range(0.6..1.0) * g[start];
        for k in 0..len.min(n - start) {
            let kf = k as f64;
            x[start + k] += amp * (-kf / decay).exp() * (2.0 * PI * fr * kf / FS).sin();
        }
        t += FS / rate * rng.random_range(0.7..1.3);
    }
    x
}

fn from_files(rng: &mut ChaCha8Rng, n: usize, paths: &[PathBuf]) -> Result<Vec<f64>> {
    let path = &paths[rng.random_range(0..paths.len())];
    let w = Waveform::read_wav(path)?;
    if w.sample_rate() != SAMPLE_RATE {
        return Err(Error::SampleRate {
            expected: SAMPLE_RATE,
            got: w.sample_rate(),
        });
    }
    if w.is_empty() {
        return Err(Error::Empty("source file"));
    }
    let s = w.samples();
    let off = rng.random_range(0..s.len());
    Ok((0..n).map(|i| s[(off + i) % s.len()] as f64).collect())
}

/// Exponential-decay impulse response: a unit direct tap followed by a noise tail.
pub fn reverb_ir(seed: u64, len_s: f64, rt60_s: f64) -> Vec<f64> {
    let mut rng = rng_for(&[0x1e7b, seed]);
    let n = ((len_s * FS) as usize).max(1);
    let tail = rng.random_range(0.2..0.4);
    let mut h: Vec<f64> = (0..n)
        .map(|k| {
            let env = (-6.9 * k as f64 / (rt60_s * FS)).exp();
            let z: f64 = StandardNormal.sample(&mut rng);
            tail * 0.05 * z * env
        })
        .collect();
    h[0] = 1.0;
    h
}

/// Generation settings of [`make_mixture`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixConfig {
    pub duration_s: f64,
    pub min_events: usize,
    pub max_events: usize,
    pub n_targets: usize,
    /// Mean RMS level of an event, dBFS.
    pub level_dbfs: f64,
    /// Per-event gain spread around the mean level, dB.
    pub event_gain_db: (f64, f64),
    /// Extra gain applied to target events, dB; sets the operating mixture SNR.
    pub target_boost_db: f64,
    /// Background level below the mean event level, dB.
    pub background_snr_db: (f64, f64),
    pub reverb: bool,
    pub reverb_len_s: f64,
    pub rt60_s: (f64, f64),
    pub enrollment_s: f64,
}

/// Target gain offset that puts the corpus-average mixture SNR near -0.4 dB;
/// found with [`calibrate_target_boost`] over 500 mixtures of the 8-class toy bank.
pub const CALIBRATED_TARGET_BOOST_DB: f64 = 12.47;

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            duration_s: 6.0,
            min_events: 3,
            max_events: 4,
            n_targets: 2,
            level_dbfs: -26.0,
            event_gain_db: (-3.0, 3.0),
            target_boost_db: CALIBRATED_TARGET_BOOST_DB,
            background_snr_db: (10.0, 20.0),
            reverb: true,
            reverb_len_s: 0.2,
            rt60_s: (0.15, 0.4),
            enrollment_s: 6.0,
        }
    }
}

impl MixConfig {
    pub fn validate(&self, bank: &SourceBank) -> Result<()> {
        n_samples(self.duration_s)?;
        n_samples(self.enrollment_s)?;
        if self.min_events == 0 || self.min_events > self.max_events {
            return Err(Error::Config("event count range is empty".into()));
        }
        if self.n_targets == 0 || self.n_targets > self.min_events {
            return Err(Error::Config("targets must be between 1 and the minimum event count".into()));
        }
        if self.max_events > bank.len() {
            return Err(Error::Config(format!(
                "{} events need as many distinct classes, the bank has {}",
                self.max_events,
                bank.len()
            )));
        }
        for (lo, hi) in [self.event_gain_db, self.background_snr_db, self.rt60_s] {
            if !(lo <= hi) {
                return Err(Error::Config(format!("range ({lo}, {hi}) is inverted")));
            }
        }
        if self.reverb && (self.reverb_len_s <= 0.0 || self.rt60_s.0 <= 0.0) {
            return Err(Error::Config("reverb length and decay must be positive".into()));
        }
        Ok(())
    }
}

/// Everything needed to realize one mixture; one line of a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureRecord {
    pub id: usize,
    pub seed: u64,
    /// Event classes; the first `n_targets` are extraction targets.
    pub classes: Vec<usize>,
    pub instance_seeds: Vec<u64>,
    /// RMS level of each event after reverberation, dBFS.
    pub gains_db: Vec<f64>,
    pub background_seed: u64,
    pub background_db: f64,
    /// One enrollment instance per target.
    pub enrollment_seeds: Vec<u64>,
}

impl MixtureRecord {
    pub fn target_classes(&self, n_targets: usize) -> &[usize] {
        &self.classes[..n_targets.min(self.classes.len())]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaledSource {
    pub class: usize,
    pub instance_seed: u64,
    pub gain_db: f64,
    pub signal: Waveform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub class: usize,
    /// The scaled reverberant event as it appears in the mixture.
    pub reference: Waveform,
    pub enrollment: Waveform,
    pub enrollment_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSample {
    pub record: MixtureRecord,
    pub mixture: Waveform,
    pub sources: Vec<ScaledSource>,
    pub background: Waveform,
    pub targets: Vec<Target>,
    /// Common factor the limiter applied to every component (1 when nothing clipped).
    pub limiter_scale: f32,
}

impl MixtureSample {
    /// Largest deviation of the mixture from the sum of its scaled components.
    pub fn identity_residual(&self) -> f32 {
        let mut sum = self.background.samples().to_vec();
        for s in &self.sources {
            for (a, b) in sum.iter_mut().zip(s.signal.samples()) {
                *a += b;
            }
        }
        sum.iter()
            .zip(self.mixture.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Mean over targets of the mixture's SNR against each target, dB.
    pub fn mixture_snr_db(&self) -> Result<f64> {
        let mut acc = 0.0;
        for t in &self.targets {
            acc += crate::evalkit::snr_db(&self.mixture, &t.reference)?;
        }
        Ok(acc / self.targets.len() as f64)
    }
}

fn db_to_amp(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// Draws the record of mixture `seed`; the realization is [`realize`].
pub fn draw_record(bank: &SourceBank, cfg: &MixConfig, id: usize, seed: u64) -> Result<MixtureRecord> {
    cfg.validate(bank)?;
    let mut rng = rng_for(&[0x2ec0, seed]);
    let n_events = rng.random_range(cfg.min_events..=cfg.max_events);
    let classes = rand::seq::index::sample(&mut rng, bank.len(), n_events).into_vec();
    let instance_seeds: Vec<u64> = (0..n_events).map(|_| rng.random()).collect();
    let gains_db = (0..n_events)
        .map(|i| {
            let g = cfg.level_dbfs + rng.random_range(cfg.event_gain_db.0..=cfg.event_gain_db.1);
            if i < cfg.n_targets {
                g + cfg.target_boost_db
            } else {
                g
            }
        })
        .collect();
    let background_seed = rng.random();
    let background_db = cfg.level_dbfs - rng.random_range(cfg.background_snr_db.0..=cfg.background_snr_db.1);
    let enrollment_seeds = (0..cfg.n_targets)
        .map(|i| loop {
            let s: u64 = rng.random();
            // never the instance that sits in the mixture
            if s != instance_seeds[i] {
                break s;
            }
        })
        .collect();
    Ok(MixtureRecord {
        id,
        seed,
        classes,
        instance_seeds,
        gains_db,
        background_seed,
        background_db,
        enrollment_seeds,
    })
}

/// Urban-like background: 1/f-shaped noise with low-frequency emphasis and slow swells.
pub fn background_noise(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = rng_for(&[0xb6, seed]);
    let w = white(&mut rng, n);
    let corner = rng.random_range(150.0..400.0);
    let y = fft_filter(&w, |f| {
        let f = f.max(20.0);
        (corner / (f + corner)).sqrt() / (1.0 + (f / 7000.0).powi(4))
    });
    let rate = rng.random_range(0.1..0.4);
    let p = rng.random_range(0.0..2.0 * PI);
    y.iter()
        .enumerate()
        .map(|(i, v)| v * (0.8 + 0.2 * (2.0 * PI * rate * i as f64 / FS + p).sin()))
        .collect()
}

fn wet(bank: &SourceBank, cfg: &MixConfig, class: usize, seed: u64, duration_s: f64) -> Result<Vec<f64>> {
    let dry: Vec<f64> = bank
        .synth_source(class, duration_s, seed)?
        .samples()
        .iter()
        .map(|&v| v as f64)
        .collect();
    if !cfg.reverb {
        return Ok(dry);
    }
    let mut rng = rng_for(&[0x7e7, seed]);
    let rt60 = rng.random_range(cfg.rt60_s.0..=cfg.rt60_s.1);
    Ok(fft_convolve(&dry, &reverb_ir(seed, cfg.reverb_len_s, rt60)))
}

fn scale_to(x: &[f64], db: f64) -> Vec<f64> {
    let r = rms(x);
    let g = if r > 0.0 { db_to_amp(db) / r } else { 0.0 };
    x.iter().map(|v| v * g).collect()
}

/// Realizes a record: reverberant events at their gains, background, limiter, enrollments.
pub fn realize(bank: &SourceBank, cfg: &MixConfig, rec: &MixtureRecord) -> Result<MixtureSample> {
    cfg.validate(bank)?;
    let n = n_samples(cfg.duration_s)?;
    let k = rec.classes.len();
    if rec.instance_seeds.len() != k || rec.gains_db.len() != k || rec.enrollment_seeds.len() != cfg.n_targets {
        return Err(Error::Config(format!("manifest record {} is inconsistent", rec.id)));
    }
    let mut comps = Vec::with_capacity(k);
    for i in 0..k {
        let x = wet(bank, cfg, rec.classes[i], rec.instance_seeds[i], cfg.duration_s)?;
        comps.push(scale_to(&x, rec.gains_db[i]));
    }
    let bg = scale_to(&background_noise(rec.background_seed, n), rec.background_db);

    let mut mix: Vec<f64> = bg.clone();
    for c in &comps {
        mix.iter_mut().zip(c).for_each(|(m, v)| *m += v);
    }
    let peak = comps
        .iter()
        .chain([&bg, &mix])
        .flat_map(|c| c.iter())
        .fold(0.0f64, |a, v| a.max(v.abs()));
    let scale = if peak > LIMIT as f64 { LIMIT as f64 / peak } else { 1.0 };

    let to_f32 = |x: &[f64]| -> Vec<f32> { x.iter().map(|v| (v * scale) as f32).collect() };
    let background = to_f32(&bg);
    let sources: Vec<Vec<f32>> = comps.iter().map(|c| to_f32(c)).collect();
    // summed in f32 from the stored components so the identity holds to rounding
    let mut mixture = background.clone();
    for s in &sources {
        mixture.iter_mut().zip(s).for_each(|(m, v)| *m += v);
    }

    let mut targets = Vec::with_capacity(cfg.n_targets);
    for i in 0..cfg.n_targets {
        let e = wet(bank, cfg, rec.classes[i], rec.enrollment_seeds[i], cfg.enrollment_s)?;
        let e = scale_to(&e, cfg.level_dbfs);
        let p = e.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let g = if p > LIMIT as f64 { LIMIT as f64 / p } else { 1.0 };
        targets.push(Target {
            class: rec.classes[i],
            reference: Waveform::new(sources[i].clone(), SAMPLE_RATE)?,
            enrollment: Waveform::new(e.iter().map(|v| (v * g) as f32).collect(), SAMPLE_RATE)?,
            enrollment_seed: rec.enrollment_seeds[i],
        });
    }
    let sources = sources
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(ScaledSource {
                class: rec.classes[i],
                instance_seed: rec.instance_seeds[i],
                gain_db: rec.gains_db[i],
                signal: Waveform::new(s, SAMPLE_RATE)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MixtureSample {
        record: rec.clone(),
        mixture: Waveform::new(mixture, SAMPLE_RATE)?,
        sources,
        background: Waveform::new(background, SAMPLE_RATE)?,
        targets,
        limiter_scale: scale as f32,
    })
}

pub fn make_mixture(bank: &SourceBank, cfg: &MixConfig, id: usize, seed: u64) -> Result<MixtureSample> {
    realize(bank, cfg, &draw_record(bank, cfg, id, seed)?)
}

/// Samplewise mean of two channels.
pub fn downmix(left: &Waveform, right: &Waveform) -> Result<Waveform> {
    if left.len() != right.len() {
        return Err(Error::Shape(format!("channel lengths {} and {}", left.len(), right.len())));
    }
    if left.sample_rate() != right.sample_rate() {
        return Err(Error::SampleRate {
            expected: left.sample_rate(),
            got: right.sample_rate(),
        });
    }
    let x = left
        .samples()
        .iter()
        .zip(right.samples())
        .map(|(l, r)| 0.5 * (l + r))
        .collect();
    Waveform::new(x, left.sample_rate())
}

/// Finds the target gain offset whose corpus-average mixture SNR equals `goal_db`.
///
/// Uses per-mixture Gram matrices of the unit-gain components, so each bisection
/// step is cheap.
pub fn calibrate_target_boost(bank: &SourceBank, cfg: &MixConfig, n: usize, base_seed: u64, goal_db: f64) -> Result<f64> {
    let probe = MixConfig {
        target_boost_db: 0.0,
        ..cfg.clone()
    };
    let mut grams = Vec::with_capacity(n);
    for i in 0..n {
        let rec = draw_record(bank, &probe, i, stream_seed(base_seed, 0, i as u64))?;
        let s = realize(bank, &probe, &rec)?;
        let mut comps: Vec<&[f32]> = s.sources.iter().map(|c| c.signal.samples()).collect();
        comps.push(s.background.samples());
        let m = comps.len();
        let mut g = vec![0.0f64; m * m];
        for a in 0..m {
            for b in a..m {
                let d: f64 = comps[a].iter().zip(comps[b]).map(|(x, y)| *x as f64 * *y as f64).sum();
                g[a * m + b] = d;
                g[b * m + a] = d;
            }
        }
        grams.push((m, g));
    }
    let nt = cfg.n_targets;
    let avg = |boost: f64| -> f64 {
        let b = db_to_amp(boost);
        let mut acc = 0.0;
        for (m, g) in &grams {
            let w: Vec<f64> = (0..*m).map(|i| if i < nt { b } else { 1.0 }).collect();
            for t in 0..nt {
                let sig = w[t] * w[t] * g[t * m + t];
                let mut noise = 0.0;
                for a in (0..*m).filter(|&a| a != t) {
                    for c in (0..*m).filter(|&c| c != t) {
                        noise += w[a] * w[c] * g[a * m + c];
                    }
                }
                acc += 10.0 * (sig / noise).log10();
            }
        }
        acc / (grams.len() * nt) as f64
    };
    let (mut lo, mut hi) = (-20.0, 20.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if avg(mid) < goal_db {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestHeader {
    format: String,
    bank: SourceBank,
    config: MixConfig,
}

/// A fixed list of mixtures with frozen enrollments, stored as JSON lines
/// (a header line, then one record per mixture).
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub bank: SourceBank,
    pub config: MixConfig,
    pub records: Vec<MixtureRecord>,
}

impl Manifest {
    pub fn generate(bank: &SourceBank, cfg: &MixConfig, n: usize, base_seed: u64) -> Result<Self> {
        let records = (0..n)
            .map(|i| draw_record(bank, cfg, i, stream_seed(base_seed, 0, i as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            bank: bank.clone(),
            config: cfg.clone(),
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn realize(&self, i: usize) -> Result<MixtureSample> {
        let rec = self
            .records
            .get(i)
            .ok_or_else(|| Error::Config(format!("manifest has no record {i}")))?;
        realize(&self.bank, &self.config, rec)
    }

    pub fn realize_all(&self) -> Result<Vec<MixtureSample>> {
        (0..self.len()).map(|i| self.realize(i)).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        let header = ManifestHeader {
            format: MANIFEST_FORMAT.into(),
            bank: self.bank.clone(),
            config: self.config.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let r = BufReader::new(std::fs::File::open(path)?);
        let mut lines = r.lines();
        let first = lines.next().ok_or(Error::Empty("manifest"))??;
        let header: ManifestHeader = serde_json::from_str(&first)?;
        if header.format != MANIFEST_FORMAT {
            return Err(Error::Config(format!("unsupported manifest format {:?}", header.format)));
        }
        header.config.validate(&header.bank)?;
        let mut records = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(Self {
            bank: header.bank,
            config: header.config,
            records,
        })
    }

    /// Writes mixture, references and enrollments of every record as WAV files.
    pub fn export_wavs(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for i in 0..self.len() {
            let s = self.realize(i)?;
            s.mixture.write_wav(dir.join(format!("{i:05}_mix.wav")))?;
            for t in &s.targets {
                t.reference.write_wav(dir.join(format!("{i:05}_ref_c{}.wav", t.class)))?;
                t.enrollment.write_wav(dir.join(format!("{i:05}_enroll_c{}.wav", t.class)))?;
            }
        }
        Ok(())
    }
}
