//! Self-describing checkpoint container: named tensors plus the model configuration.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device};
use safetensors::SafeTensors;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TseModel};
use crate::nn::ParamStore;

pub const FORMAT: &str = "tseforge-ckpt-v1";

const KEY_FORMAT: &str = "format";
const KEY_CONFIG: &str = "config";
const KEY_DTYPE: &str = "dtype";

/// Writes every model parameter together with the configuration header.
pub fn save(model: &TseModel, path: impl AsRef<Path>) -> Result<()> {
    save_with(model, &[], path)
}

/// Like [`save`], with extra string entries in the header (e.g. training step).
pub fn save_with(model: &TseModel, extra: &[(&str, String)], path: impl AsRef<Path>) -> Result<()> {
    let mut meta = HashMap::new();
    for (k, v) in extra {
        meta.insert(k.to_string(), v.clone());
    }
    meta.insert(KEY_FORMAT.into(), FORMAT.into());
    meta.insert(KEY_CONFIG.into(), serde_json::to_string(model.config())?);
    meta.insert(KEY_DTYPE.into(), format!("{:?}", model.dtype()));
    let tensors: Vec<(String, candle_core::Tensor)> = model
        .store()
        .vars()
        .into_iter()
        .map(|(n, v)| (n, v.as_tensor().clone()))
        .collect();
    safetensors::serialize_to_file(tensors, Some(meta), path.as_ref())
        .map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Header of a checkpoint file.
#[derive(Debug, Clone)]
pub struct Header {
    pub config: ModelConfig,
    pub dtype: DType,
    pub extra: HashMap<String, String>,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let (_, meta) =
        SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut map = meta.metadata().clone().unwrap_or_default();
    match map.remove(KEY_FORMAT) {
        Some(f) if f == FORMAT => {}
        Some(f) => return Err(Error::Checkpoint(format!("unsupported format {f:?}"))),
        None => return Err(Error::Checkpoint("missing format header".into())),
    }
    let config = map
        .remove(KEY_CONFIG)
        .ok_or_else(|| Error::Checkpoint("missing model configuration".into()))?;
    let config: ModelConfig = serde_json::from_str(&config)?;
    let dtype = match map.remove(KEY_DTYPE).as_deref() {
        Some("F64") => DType::F64,
        Some("F32") | None => DType::F32,
        Some(other) => return Err(Error::Checkpoint(format!("unsupported dtype {other}"))),
    };
    Ok(Header {
        config,
        dtype,
        extra: map,
    })
}

/// Reads only the header.
pub fn read_header(path: impl AsRef<Path>) -> Result<Header> {
    parse_header(&std::fs::read(path)?)
}

/// Loads a model; every parameter the configuration needs must be present with the right shape.
pub fn load(path: impl AsRef<Path>) -> Result<(TseModel, Header)> {
    let bytes = std::fs::read(path)?;
    let header = parse_header(&bytes)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    let n_saved = tensors.len();
    let store = ParamStore::from_tensors(tensors, header.dtype);
    let model = TseModel::with_store(&header.config, store).map_err(|e| match e {
        Error::Checkpoint(_) => e,
        other => Error::Checkpoint(format!("checkpoint does not match its configuration: {other}")),
    })?;
    if model.store().names().len() != n_saved {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {n_saved} tensors but the model uses {}",
            model.store().names().len()
        )));
    }
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clue::ClueSpec;
    use crate::signal::Waveform;

    #[test]
    fn round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let cfg = ModelConfig::preset("soundbeam-m2d-full", 3).unwrap();
        let model = TseModel::new(&cfg, 5, DType::F32).unwrap();
        save_with(&model, &[("step", "12".into())], &path).unwrap();
        let (loaded, header) = load(&path).unwrap();
        assert_eq!(header.config, cfg);
        assert_eq!(header.extra.get("step").map(String::as_str), Some("12"));
        assert_eq!(
            loaded.store().checksum("").unwrap(),
            model.store().checksum("").unwrap()
        );
        let mix = Waveform::new((0..2000).map(|i| (i as f32 * 0.05).sin() * 0.2).collect(), 16000).unwrap();
        let a = model.extract(&mix, &ClueSpec::label(1)).unwrap();
        let b = loaded.extract(&mix, &ClueSpec::label(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_foreign_files_and_mismatched_configs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.safetensors");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));

        let cfg = ModelConfig::preset("soundbeam-baseline", 3).unwrap();
        let model = TseModel::new(&cfg, 5, DType::F32).unwrap();
        save(&model, &path).unwrap();
        // rewrite the header with more classes than the saved tensors support
        let bytes = std::fs::read(&path).unwrap();
        let mut tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu).unwrap();
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), FORMAT.to_string());
        let mut other = cfg.clone();
        other.n_classes = 7;
        meta.insert("config".to_string(), serde_json::to_string(&other).unwrap());
        let list: Vec<_> = tensors.drain().collect();
        safetensors::serialize_to_file(list, Some(meta), &path).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }
}
