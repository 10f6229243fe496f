//! Checkpoint file format, shared with the trainer.
//!
//! Layout: the magic bytes `SFLM1`, a little-endian `u32` header length, a
//! UTF-8 JSON header (config, vocabulary, feature-bank order, seed, epoch,
//! metrics, and the array manifest), then the arrays in manifest order as
//! row-major little-endian `f32` values. Round trips are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelError, Param};
use crate::semantics::FEATURE_NAMES;

pub const MAGIC: &[u8; 5] = b"SFLM1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub decay: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub vocab: Vec<String>,
    pub features: Vec<String>,
    pub seed: u64,
    pub epoch: u32,
    pub metrics: serde_json::Value,
    pub manifest: Vec<ManifestEntry>,
}

pub fn save(
    path: &Path,
    model: &Model<f32>,
    vocab: &[String],
    seed: u64,
    epoch: u32,
    metrics: serde_json::Value,
) -> Result<(), ModelError> {
    let header = CheckpointHeader {
        config: model.config,
        vocab: vocab.to_vec(),
        features: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        seed,
        epoch,
        metrics,
        manifest: model
            .params
            .iter()
            .map(|p| ManifestEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                decay: p.decay,
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&u32::try_from(header_bytes.len()).expect("header fits u32").to_le_bytes())?;
    out.write_all(&header_bytes)?;
    for p in &model.params {
        for v in p.value.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model<f32>, CheckpointHeader), ModelError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 5];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::Format(format!("bad magic {magic:?}")));
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;

    let mut params = Vec::with_capacity(header.manifest.len());
    for entry in &header.manifest {
        let count: usize = entry.shape.iter().product();
        let mut buf = vec![0u8; count * 4];
        file.read_exact(&mut buf)?;
        let values: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let value = ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
            .map_err(|e| ModelError::Format(format!("array {}: {e}", entry.name)))?;
        params.push(Param { name: entry.name.clone(), value, decay: entry.decay });
    }
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing)? != 0 {
        return Err(ModelError::Format("trailing bytes after arrays".into()));
    }
    let model = Model::from_params(header.config, params)?;
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Variant};

    #[test]
    fn round_trip_is_bit_exact() {
        let model = Model::<f32>::init(ModelConfig::tiny(Variant::Fusion), 42).unwrap();
        let vocab: Vec<String> = (0..40).map(|i| format!("tok{i}")).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sflm");
        save(&path, &model, &vocab, 42, 3, serde_json::json!({"val_ppl": 2.0})).unwrap();
        let bytes_a = std::fs::read(&path).unwrap();

        let (loaded, header) = load(&path).unwrap();
        assert_eq!(header.epoch, 3);
        assert_eq!(header.vocab.len(), 40);
        assert_eq!(header.features.len(), crate::semantics::FEATURE_COUNT);
        assert_eq!(loaded.params.len(), model.params.len());
        for (a, b) in loaded.params.iter().zip(model.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.decay, b.decay);
            assert_eq!(a.value, b.value);
        }

        let path2 = dir.path().join("model2.sflm");
        save(&path2, &loaded, &header.vocab, header.seed, header.epoch, header.metrics).unwrap();
        let bytes_b = std::fs::read(&path2).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.sflm");
        std::fs::write(&path, b"NOTSF\x00\x00\x00\x00").unwrap();
        assert!(matches!(load(&path), Err(ModelError::Format(_))));
    }
}
