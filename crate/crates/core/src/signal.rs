//! Waveforms, framing and the log-mel front-end.
//!
//! Frames are centred: frame `t` is centred on sample `t * hop`, with reflect
//! padding at both signal edges. Only frames whose hop block `[t*hop, (t+1)*hop)`
//! lies inside the signal are emitted, so an integral number of seconds gives
//! exactly 100 frames per second.

use std::path::Path;
use std::sync::Arc;

use realfft::{RealFftPlanner, RealToComplex};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const N_MELS: usize = 80;
pub const N_FFT: usize = 512;
pub const FRAME_WIN_S: f64 = 0.025;
pub const FRAME_HOP_S: f64 = 0.010;
/// Power floor applied before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

const MEL_F_MIN: f64 = 0.0;
const MEL_F_MAX: f64 = 8_000.0;

/// A mono sample sequence at a known rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Audio("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform samples"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum()
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    pub fn scaled(&self, gain: f32) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Reads a mono 16 kHz-or-other WAV file holding 16-bit PCM or 32-bit float samples.
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::Audio(format!(
                "{} channels; only mono input is accepted",
                spec.channels
            )));
        }
        let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
            (hound::SampleFormat::Int, 16) => reader
                .samples::<i16>()
                .map(|s| s.map(|v| v as f32 / 32768.0))
                .collect::<std::result::Result<_, _>>()?,
            (hound::SampleFormat::Float, 32) => {
                reader.samples::<f32>().collect::<std::result::Result<_, _>>()?
            }
            (fmt, bits) => {
                return Err(Error::Audio(format!("{bits}-bit {fmt:?} samples")));
            }
        };
        Self::new(samples, spec.sample_rate)
    }

    /// Writes 32-bit float mono WAV.
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut writer = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            writer.write_sample(s)?;
        }
        writer.finalize()?;
        Ok(())
    }
}

/// Log-mel energies laid out as `[n_mels][n_frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    values: Vec<f32>,
    n_frames: usize,
}

impl MelSpectrogram {
    pub fn from_values(values: Vec<f32>, n_frames: usize) -> Result<Self> {
        if values.len() != N_MELS * n_frames {
            return Err(Error::Shape(format!(
                "mel values {} != {N_MELS} x {n_frames}",
                values.len()
            )));
        }
        Ok(Self { values, n_frames })
    }

    pub fn n_mels(&self) -> usize {
        N_MELS
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn frame_hop_s(&self) -> f64 {
        FRAME_HOP_S
    }

    pub fn frame_win_s(&self) -> f64 {
        FRAME_WIN_S
    }

    pub fn get(&self, mel: usize, frame: usize) -> f32 {
        self.values[mel * self.n_frames + frame]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Keeps the first `n` frames.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.n_frames);
        let mut values = Vec::with_capacity(N_MELS * n);
        for m in 0..N_MELS {
            let row = &self.values[m * self.n_frames..m * self.n_frames + n];
            values.extend_from_slice(row);
        }
        Self {
            values,
            n_frames: n,
        }
    }
}

fn window_len(sample_rate: u32) -> usize {
    (FRAME_WIN_S * sample_rate as f64).round() as usize
}

fn hop_len(sample_rate: u32) -> usize {
    (FRAME_HOP_S * sample_rate as f64).round() as usize
}

/// Number of analysis frames `logmel` yields for `n_samples` of input.
pub fn frame_count(n_samples: usize, sample_rate: u32) -> Result<usize> {
    if sample_rate == 0 {
        return Err(Error::Audio("sample rate must be positive".into()));
    }
    let win = window_len(sample_rate);
    if n_samples < win {
        return Err(Error::InputTooShort {
            what: "analysis window",
            needed: win,
            got: n_samples,
        });
    }
    Ok(n_samples / hop_len(sample_rate))
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Centre frequencies (Hz) of the 80 triangular filters.
pub fn mel_center_frequencies() -> Vec<f64> {
    let lo = hz_to_mel(MEL_F_MIN);
    let hi = hz_to_mel(MEL_F_MAX);
    (1..=N_MELS)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64))
        .collect()
}

/// Area-normalised triangular filterbank, `[n_mels][n_fft/2 + 1]`.
fn mel_filterbank(sample_rate: u32) -> Vec<Vec<f64>> {
    let n_bins = N_FFT / 2 + 1;
    let lo = hz_to_mel(MEL_F_MIN);
    let hi = hz_to_mel(MEL_F_MAX);
    let edges: Vec<f64> = (0..N_MELS + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / N_FFT as f64;
    (0..N_MELS)
        .map(|m| {
            let (f_lo, f_c, f_hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let norm = 2.0 / (f_hi - f_lo);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let up = (f - f_lo) / (f_c - f_lo);
                    let down = (f_hi - f) / (f_hi - f_c);
                    up.min(down).max(0.0) * norm
                })
                .collect()
        })
        .collect()
}

/// Reusable log-mel analyser (filterbank, window and FFT plan).
#[derive(Clone)]
pub struct MelExtractor {
    sample_rate: u32,
    win: usize,
    hop: usize,
    window: Vec<f64>,
    filterbank: Vec<Vec<f64>>,
    fft: Arc<dyn RealToComplex<f64>>,
}

impl std::fmt::Debug for MelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelExtractor")
            .field("sample_rate", &self.sample_rate)
            .field("win", &self.win)
            .field("hop", &self.hop)
            .finish()
    }
}

impl Default for MelExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl MelExtractor {
    pub fn new() -> Self {
        let sample_rate = SAMPLE_RATE;
        let win = window_len(sample_rate);
        let hop = hop_len(sample_rate);
        // periodic Hann
        let window = (0..win)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos())
            .collect();
        let fft = RealFftPlanner::<f64>::new().plan_fft_forward(N_FFT);
        Self {
            sample_rate,
            win,
            hop,
            window,
            filterbank: mel_filterbank(sample_rate),
            fft,
        }
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn win(&self) -> usize {
        self.win
    }

    /// Samples of reflect padding on each side of the signal.
    pub fn pad(&self) -> usize {
        self.win / 2
    }

    /// Log-mel column for the frame starting at `start` in an already padded buffer.
    pub fn frame_into(&self, padded: &[f32], start: usize, out: &mut [f32; N_MELS]) {
        let mut buf = self.fft.make_input_vec();
        let off = (N_FFT - self.win) / 2;
        for i in 0..self.win {
            buf[off + i] = padded[start + i] as f64 * self.window[i];
        }
        let mut spec = self.fft.make_output_vec();
        self.fft
            .process(&mut buf, &mut spec)
            .expect("fft buffers sized by the planner");
        let power: Vec<f64> = spec.iter().map(|c| c.norm_sqr()).collect();
        for (m, filt) in self.filterbank.iter().enumerate() {
            let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
            out[m] = e.max(LOG_FLOOR).ln() as f32;
        }
    }

    /// Reflect-pads the left edge only; used by both the offline and streaming paths.
    pub fn reflect_left(&self, samples: &[f32]) -> Vec<f32> {
        let pad = self.pad();
        let mut out = Vec::with_capacity(samples.len() + pad);
        out.extend((1..=pad).rev().map(|i| samples[i]));
        out.extend_from_slice(samples);
        out
    }

    pub fn logmel(&self, w: &Waveform) -> Result<MelSpectrogram> {
        if w.sample_rate() != self.sample_rate {
            return Err(Error::SampleRate {
                expected: self.sample_rate,
                got: w.sample_rate(),
            });
        }
        let x = w.samples();
        if x.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("logmel input"));
        }
        let n_frames = frame_count(x.len(), self.sample_rate)?;
        let pad = self.pad();
        let mut padded = self.reflect_left(x);
        padded.extend((0..pad).map(|i| x[x.len() - 2 - i]));

        let mut values = vec![0.0f32; N_MELS * n_frames];
        let mut col = [0.0f32; N_MELS];
        for t in 0..n_frames {
            self.frame_into(&padded, t * self.hop, &mut col);
            for (m, v) in col.iter().enumerate() {
                values[m * n_frames + t] = *v;
            }
        }
        MelSpectrogram::from_values(values, n_frames)
    }
}

/// 80-band log-mel spectrogram of a 16 kHz waveform.
pub fn logmel(w: &Waveform) -> Result<MelSpectrogram> {
    MelExtractor::new().logmel(w)
}
