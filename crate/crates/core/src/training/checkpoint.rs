//! Versioned binary checkpoints: JSON header, little-endian tensor data in
//! a canonical order, and a trailing SHA-256 checksum.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{ModelConfig, Parameters};
use crate::numerics::{Scalar, Tensor};

use super::{OptimizerState, TrainingError};

const MAGIC: &[u8; 8] = b"KGCHCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    model: ModelConfig,
    step: usize,
    /// Parameter tensors, then first moments, then second moments — each
    /// block sorted by name; data bytes follow in the same order.
    params: Vec<TensorMeta>,
    moments_m: Vec<TensorMeta>,
    moments_v: Vec<TensorMeta>,
}

/// A loaded checkpoint: everything needed to resume or serve.
#[derive(Debug)]
pub struct Checkpoint<T: Scalar> {
    pub params: Parameters<T>,
    pub state: OptimizerState<T>,
    pub config: ModelConfig,
    pub step: usize,
}

fn meta_of<T: Scalar>(map: &BTreeMap<String, Tensor<T>>) -> Vec<TensorMeta> {
    map.iter()
        .map(|(name, t)| TensorMeta {
            name: name.clone(),
            shape: t.shape().to_vec(),
        })
        .collect()
}

fn push_tensors<T: Scalar>(buf: &mut Vec<u8>, map: &BTreeMap<String, Tensor<T>>) {
    for tensor in map.values() {
        for &x in tensor.data() {
            buf.extend_from_slice(&x.to_le_bytes_vec());
        }
    }
}

/// Write a checkpoint atomically (temp file + rename).
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    params: &Parameters<T>,
    state: &OptimizerState<T>,
    config: &ModelConfig,
) -> Result<(), TrainingError> {
    let (step, m, v) = state.parts();
    let param_map: BTreeMap<String, Tensor<T>> = params
        .iter()
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    let header = Header {
        dtype: T::DTYPE.to_string(),
        model: config.clone(),
        step,
        params: meta_of(&param_map),
        moments_m: meta_of(m),
        moments_v: meta_of(v),
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| TrainingError::BadCheckpoint {
        path: path.to_path_buf(),
        detail: format!("header serialization: {e}"),
    })?;

    let mut body = Vec::new();
    body.extend_from_slice(MAGIC);
    body.extend_from_slice(&VERSION.to_le_bytes());
    body.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    body.extend_from_slice(&header_json);
    push_tensors(&mut body, &param_map);
    push_tensors(&mut body, m);
    push_tensors(&mut body, v);
    let digest = Sha256::digest(&body);

    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut file = std::fs::File::create(&tmp)?;
        file.write_all(&body)?;
        file.write_all(&digest)?;
        file.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_tensor_block<T: Scalar>(
    metas: &[TensorMeta],
    bytes: &[u8],
    offset: &mut usize,
    path: &Path,
) -> Result<BTreeMap<String, Tensor<T>>, TrainingError> {
    let mut map = BTreeMap::new();
    for meta in metas {
        let count: usize = meta.shape.iter().product();
        let need = count * T::WIDTH;
        let end = *offset + need;
        if end > bytes.len() {
            return Err(TrainingError::BadCheckpoint {
                path: path.to_path_buf(),
                detail: format!("tensor '{}' data runs past end of file", meta.name),
            });
        }
        let data: Vec<T> = bytes[*offset..end]
            .chunks_exact(T::WIDTH)
            .map(T::from_le_slice)
            .collect();
        *offset = end;
        map.insert(meta.name.clone(), Tensor::new(meta.shape.clone(), data));
    }
    Ok(map)
}

/// Read and verify a checkpoint. With `expected` set, the stored model
/// configuration must match it exactly.
pub fn load_checkpoint<T: Scalar>(
    path: &Path,
    expected: Option<&ModelConfig>,
) -> Result<Checkpoint<T>, TrainingError> {
    let bad = |detail: String| TrainingError::BadCheckpoint {
        path: path.to_path_buf(),
        detail,
    };
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    if raw.len() < MAGIC.len() + 4 + 8 + 32 {
        return Err(bad("file too short to be a checkpoint".into()));
    }

    let (body, stored_digest) = raw.split_at(raw.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored_digest {
        return Err(bad("checksum mismatch; file is truncated or corrupt".into()));
    }

    if &body[..MAGIC.len()] != MAGIC {
        return Err(bad("bad magic bytes".into()));
    }
    let mut offset = MAGIC.len();
    let version = u32::from_le_bytes(body[offset..offset + 4].try_into().unwrap());
    offset += 4;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(body[offset..offset + 8].try_into().unwrap()) as usize;
    offset += 8;
    if offset + header_len > body.len() {
        return Err(bad("header length exceeds file size".into()));
    }
    let header: Header = serde_json::from_slice(&body[offset..offset + header_len])
        .map_err(|e| bad(format!("header parse: {e}")))?;
    offset += header_len;

    if header.dtype != T::DTYPE {
        return Err(bad(format!(
            "stored dtype {} does not match requested {}",
            header.dtype,
            T::DTYPE
        )));
    }
    if let Some(expected) = expected {
        if expected != &header.model {
            return Err(TrainingError::ConfigMismatch {
                detail: format!("stored {:?}, expected {:?}", header.model, expected),
            });
        }
    }

    let params_map = read_tensor_block::<T>(&header.params, body, &mut offset, path)?;
    let m = read_tensor_block::<T>(&header.moments_m, body, &mut offset, path)?;
    let v = read_tensor_block::<T>(&header.moments_v, body, &mut offset, path)?;
    if offset != body.len() {
        return Err(bad(format!(
            "{} trailing bytes after tensor data",
            body.len() - offset
        )));
    }

    let params = Parameters::from_tensors(header.model.clone(), params_map)?;
    let state = OptimizerState::from_parts(&params, header.step, m, v)?;
    Ok(Checkpoint {
        params,
        state,
        config: header.model,
        step: header.step,
    })
}
