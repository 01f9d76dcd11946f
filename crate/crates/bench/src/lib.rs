//! Shared inputs for the benchmarks.

use tseforge::mixsim::{make_mixture, MixConfig, MixtureSample, SourceBank};
use tseforge::model::{ModelConfig, TseModel};
use tseforge::trainer::Batch;
use tseforge::{DType, Result};

pub const N_CLASSES: usize = 4;

/// One simulated mixture of `duration_s` seconds with enrollments of the same length.
pub fn sample(duration_s: f64, seed: u64) -> Result<MixtureSample> {
    let bank = SourceBank::toy(N_CLASSES)?;
    let cfg = MixConfig {
        duration_s,
        enrollment_s: duration_s,
        ..MixConfig::default()
    };
    make_mixture(&bank, &cfg, 0, seed)
}

pub fn model(preset: &str) -> Result<TseModel> {
    TseModel::new(&ModelConfig::preset(preset, N_CLASSES)?, 0, DType::F32)
}

/// Training batch with every target of `n_mixtures` mixtures.
pub fn batch(n_mixtures: usize, duration_s: f64) -> Result<Batch> {
    let samples = (0..n_mixtures as u64)
        .map(|s| sample(duration_s, s + 1))
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch::from_samples(&samples))
}
