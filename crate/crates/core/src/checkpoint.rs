//! Binary checkpoints.
//!
//! Layout: the 8 magic bytes `IOTCKPT1`, a little-endian `u64` metadata
//! length, UTF-8 JSON metadata (model spec, provenance, tensor manifest),
//! then every tensor as little-endian `f32` values in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{IotModel, ModelSpec};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"IOTCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload section.
    pub offset: u64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub spec: ModelSpec,
    /// Resolved run configuration, if the model came from a training run.
    pub run: Value,
    pub seed: u64,
    pub step: u64,
    /// Per-epoch training records.
    pub history: Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: IotModel<f32>,
}

/// Provenance stored next to the weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Provenance {
    pub run: Value,
    pub seed: u64,
    pub step: u64,
    pub history: Value,
}

pub fn to_bytes(model: &IotModel<f32>, prov: &Provenance) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(model.store.len());
    let mut offset = 0u64;
    for (name, t) in model.store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            count: t.numel() as u64,
        });
        offset += 4 * t.numel() as u64;
    }
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        spec: model.spec.clone(),
        run: prov.run.clone(),
        seed: prov.seed,
        step: prov.step,
        history: prov.history.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in model.store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 {
        return Err(corrupt(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        if bytes[..7] == MAGIC[..7] {
            return Err(corrupt(format!(
                "unsupported format version {:?}",
                String::from_utf8_lossy(&bytes[7..8])
            )));
        }
        return Err(corrupt("bad magic bytes"));
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let payload_start = 16u64
        .checked_add(meta_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| corrupt(format!("metadata length {meta_len} exceeds file size {}", bytes.len())))?
        as usize;
    let meta: CheckpointMeta =
        serde_json::from_slice(&bytes[16..payload_start]).map_err(|e| corrupt(format!("metadata: {e}")))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {}", meta.format_version)));
    }
    let payload = &bytes[payload_start..];
    let mut store = ParamStore::new();
    let mut expected = 0u64;
    for entry in &meta.tensors {
        let numel: usize = entry.shape.iter().product();
        if numel as u64 != entry.count {
            return Err(corrupt(format!("{}: shape {:?} does not hold {} values", entry.name, entry.shape, entry.count)));
        }
        if entry.offset != expected {
            return Err(corrupt(format!("{}: offset {} out of sequence", entry.name, entry.offset)));
        }
        let end = entry
            .offset
            .checked_add(4 * entry.count)
            .filter(|&e| e <= payload.len() as u64)
            .ok_or_else(|| corrupt(format!("{}: data runs past the end of the file (truncated?)", entry.name)))?;
        let data: Vec<f32> = payload[entry.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        store
            .insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data).map_err(|e| corrupt(e.to_string()))?)
            .map_err(|e| corrupt(e.to_string()))?;
        expected = end;
    }
    if expected != payload.len() as u64 {
        return Err(corrupt(format!("{} trailing bytes after the last tensor", payload.len() as u64 - expected)));
    }
    let model = IotModel::from_store(meta.spec.clone(), store)?;
    Ok(Checkpoint { meta, model })
}

pub fn save_checkpoint(path: &Path, model: &IotModel<f32>, prov: &Provenance) -> Result<()> {
    let bytes = to_bytes(model, prov)?;
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    from_bytes(&bytes)
}

impl Checkpoint {
    pub fn provenance(&self) -> Provenance {
        Provenance {
            run: self.meta.run.clone(),
            seed: self.meta.seed,
            step: self.meta.step,
            history: self.meta.history.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        to_bytes(&self.model, &self.provenance())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use serde_json::json;

    use super::*;
    use crate::model::{RoutingConfig, TrainMode};
    use crate::transformer::ModelConfig;

    fn model() -> IotModel<f32> {
        let spec = ModelSpec {
            model: ModelConfig::default(),
            routing: RoutingConfig {
                mode: TrainMode::Iot,
                decoder_orders: Some(vec![4, 6]),
                ..RoutingConfig::default()
            },
        };
        let mut m = IotModel::new(spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let id = m.dec_predictor.unwrap();
        m.store.value_mut(id).data_mut()[3] = 0.123_456_79;
        m
    }

    fn prov() -> Provenance {
        Provenance {
            run: json!({"lr": 0.1, "name": "x"}),
            seed: 7,
            step: 42,
            history: json!([{"epoch": 1, "dev": 0.333_333_333_333_333_3}]),
        }
    }

    #[test]
    fn round_trip_is_bit_exact_and_resave_identical() {
        let m = model();
        let bytes = to_bytes(&m, &prov()).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let ck = from_bytes(&bytes).unwrap();
        for ((n1, a), (n2, b)) in m.store.iter().zip(ck.model.store.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(ck.provenance(), prov());
        assert_eq!(ck.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = to_bytes(&model(), &prov()).unwrap();
        for cut in [0, 10, 20, bytes.len() - 1] {
            assert!(matches!(from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).unwrap_err().to_string().contains("magic"));
        let mut v2 = bytes.clone();
        v2[7] = b'2';
        assert!(from_bytes(&v2).unwrap_err().to_string().contains("version"));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(from_bytes(&extra), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &model(), &prov()).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.meta.step, 42);
        assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
