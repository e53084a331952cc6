//! Single-file checkpoint format: 5-byte magic `TFDN1`, a 4-byte
//! little-endian header length, a JSON text header (config, step, tensor
//! names/shapes/offsets), then contiguous 32-bit little-endian floats.
//! Offsets are byte positions into the payload.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::mini::{MiniDenoiser, MiniDenoiserConfig, MiniParams, TrainState};
use crate::error::{CoreError, Result};

pub const MAGIC: &[u8; 5] = b"TFDN1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: MiniDenoiserConfig,
    step: u64,
    tensors: Vec<TensorMeta>,
}

/// An in-memory checkpoint: config, training-step counter, and named f32
/// tensors (parameters plus optimizer moments).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: MiniDenoiserConfig,
    pub step: u64,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

fn narrow(name: &str, shape: Vec<usize>, data: &[f64]) -> (String, Vec<usize>, Vec<f32>) {
    (
        name.to_string(),
        shape,
        data.iter().map(|&v| v as f32).collect(),
    )
}

impl Checkpoint {
    /// Snapshot a model and its optimizer state. Parameters are narrowed to
    /// f32; widening back is exact, so save/load round-trips are stable.
    pub fn from_training(model: &MiniDenoiser, state: &TrainState) -> Self {
        let mut tensors = Vec::new();
        for (name, shape, data) in model.params().tensors() {
            tensors.push(narrow(&format!("param/{name}"), shape, data));
        }
        for (name, shape, data) in state.m.tensors() {
            tensors.push(narrow(&format!("adam_m/{name}"), shape, data));
        }
        for (name, shape, data) in state.v.tensors() {
            tensors.push(narrow(&format!("adam_v/{name}"), shape, data));
        }
        Self {
            config: model.config().clone(),
            step: state.step as u64,
            tensors,
        }
    }

    /// Rebuild the model and optimizer state, widening f32 to f64.
    pub fn into_training(self) -> Result<(MiniDenoiser, TrainState)> {
        let mut params = MiniParams::zeros(&self.config);
        let mut m = MiniParams::zeros(&self.config);
        let mut v = MiniParams::zeros(&self.config);
        for (name, shape, data) in &self.tensors {
            let (prefix, base) = name.split_once('/').ok_or_else(|| {
                CoreError::CheckpointShape(format!("tensor name {name} has no namespace"))
            })?;
            let target = match prefix {
                "param" => &mut params,
                "adam_m" => &mut m,
                "adam_v" => &mut v,
                other => {
                    return Err(CoreError::CheckpointShape(format!(
                        "unknown tensor namespace {other}"
                    )))
                }
            };
            let mut found = false;
            for (tname, slice) in target.tensors_mut() {
                if tname == base {
                    if slice.len() != data.len() {
                        return Err(CoreError::CheckpointShape(format!(
                            "tensor {name} has {} values, config implies {}",
                            data.len(),
                            slice.len()
                        )));
                    }
                    let expect: usize = shape.iter().product();
                    if expect != data.len() {
                        return Err(CoreError::CheckpointShape(format!(
                            "tensor {name} shape {shape:?} does not match {} values",
                            data.len()
                        )));
                    }
                    for (dst, &src) in slice.iter_mut().zip(data.iter()) {
                        *dst = f64::from(src);
                    }
                    found = true;
                    break;
                }
            }
            if !found {
                return Err(CoreError::CheckpointShape(format!(
                    "tensor {name} not part of the configured model"
                )));
            }
        }
        let model = MiniDenoiser::from_parts(self.config, params)?;
        let state = TrainState {
            step: self.step as usize,
            m,
            v,
        };
        Ok((model, state))
    }
}

/// Serialize to the on-disk layout.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut payload: Vec<u8> = Vec::new();
    let mut metas = Vec::with_capacity(ckpt.tensors.len());
    for (name, shape, data) in &ckpt.tensors {
        let offset = payload.len();
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        metas.push(TensorMeta {
            name: name.clone(),
            shape: shape.clone(),
            offset,
            len: data.len(),
        });
    }
    let header = Header {
        config: ckpt.config.clone(),
        step: ckpt.step,
        tensors: metas,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| CoreError::InvalidParameter(format!("header serialization: {e}")))?;
    let mut file = File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&(header_json.len() as u32).to_le_bytes())?;
    file.write_all(&header_json)?;
    file.write_all(&payload)?;
    Ok(())
}

/// Parse the on-disk layout, verifying magic, header integrity, and that
/// the payload length matches what the header promises.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut file = File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    if bytes.len() < MAGIC.len() + 4 {
        return Err(CoreError::CheckpointTruncated(format!(
            "file is only {} bytes",
            bytes.len()
        )));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(CoreError::CheckpointVersion(format!(
            "bad magic {:?}",
            &bytes[..MAGIC.len()]
        )));
    }
    let header_len =
        u32::from_le_bytes(bytes[MAGIC.len()..MAGIC.len() + 4].try_into().unwrap()) as usize;
    let header_start = MAGIC.len() + 4;
    if bytes.len() < header_start + header_len {
        return Err(CoreError::CheckpointTruncated(
            "header extends past end of file".into(),
        ));
    }
    let header: Header = serde_json::from_slice(&bytes[header_start..header_start + header_len])
        .map_err(|e| CoreError::CheckpointVersion(format!("unreadable header: {e}")))?;
    let payload = &bytes[header_start + header_len..];
    let expected: usize = header.tensors.iter().map(|t| t.len * 4).sum();
    if payload.len() != expected {
        return Err(CoreError::CheckpointTruncated(format!(
            "payload is {} bytes, header promises {expected}",
            payload.len()
        )));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for meta in &header.tensors {
        let product: usize = meta.shape.iter().product();
        if product != meta.len {
            return Err(CoreError::CheckpointShape(format!(
                "tensor {} shape {:?} does not match {} values",
                meta.name, meta.shape, meta.len
            )));
        }
        let end = meta
            .offset
            .checked_add(meta.len * 4)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| {
                CoreError::CheckpointTruncated(format!(
                    "tensor {} extends past payload",
                    meta.name
                ))
            })?;
        let mut data = Vec::with_capacity(meta.len);
        for chunk in payload[meta.offset..end].chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        tensors.push((meta.name.clone(), meta.shape.clone(), data));
    }
    Ok(Checkpoint {
        config: header.config,
        step: header.step,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::mini::AdamParams;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn small_model() -> (MiniDenoiser, TrainState) {
        let cfg = MiniDenoiserConfig {
            vocab: 5,
            cond_dim: 3,
            blocks: 1,
            width: 8,
            heads: 2,
            ff_width: 16,
            concat_period: 1,
            cond_dropout: 0.1,
        };
        let model = MiniDenoiser::new(cfg, 42).unwrap();
        let mut state = TrainState::new(&model);
        state.step = 17;
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        for (_, data) in state.m.tensors_mut() {
            for v in data.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        (model, state)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (model, state) = small_model();
        let ckpt = Checkpoint::from_training(&model, &state);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tfdn");
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt, loaded);
        // A second round trip through disk is also identical.
        let path2 = dir.path().join("model2.tfdn");
        save_checkpoint(&path2, &loaded).unwrap();
        assert_eq!(load_checkpoint(&path2).unwrap(), ckpt);
    }

    #[test]
    fn reload_supports_further_training() {
        let (model, state) = small_model();
        let ckpt = Checkpoint::from_training(&model, &state);
        let (mut model2, mut state2) = ckpt.into_training().unwrap();
        assert_eq!(state2.step, 17);
        assert_eq!(model2.config(), model.config());
        let sched = crate::schedule::NoiseSchedule::cosine(6, 0.008).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let x0 = crate::diffusion::TokenSeq::new(vec![0, 1, 2], 5).unwrap();
        let mut frames = ndarray::Array2::zeros((3, 3));
        for v in frames.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let cond = crate::denoiser::ConditioningSeq::present(frames).unwrap();
        let out = crate::denoiser::mini::train_step(
            &mut model2,
            &mut state2,
            &AdamParams::default(),
            &[(x0, cond)],
            &sched,
            &mut rng,
        );
        assert!(out.is_ok());
        assert_eq!(state2.step, 18);
    }

    #[test]
    fn corrupted_magic_is_a_version_error() {
        let (model, state) = small_model();
        let ckpt = Checkpoint::from_training(&model, &state);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tfdn");
        save_checkpoint(&path, &ckpt).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CoreError::CheckpointVersion(_))
        ));
    }

    #[test]
    fn truncated_payload_is_detected() {
        let (model, state) = small_model();
        let ckpt = Checkpoint::from_training(&model, &state);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tfdn");
        save_checkpoint(&path, &ckpt).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CoreError::CheckpointTruncated(_))
        ));
    }

    #[test]
    fn shape_mismatch_is_detected() {
        let (model, state) = small_model();
        let mut ckpt = Checkpoint::from_training(&model, &state);
        // Claim a wrong shape for the first tensor.
        ckpt.tensors[0].1 = vec![1, 1];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tfdn");
        save_checkpoint(&path, &ckpt).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CoreError::CheckpointShape(_))
        ));
    }

    #[test]
    fn wrong_namespace_rejected_on_rebuild() {
        let (model, state) = small_model();
        let mut ckpt = Checkpoint::from_training(&model, &state);
        ckpt.tensors[0].0 = "bogus/char_emb".into();
        assert!(matches!(
            ckpt.into_training(),
            Err(CoreError::CheckpointShape(_))
        ));
    }
}
