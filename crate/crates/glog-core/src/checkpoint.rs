//! Model checkpoints.
//!
//! Single binary file: the magic bytes `GLOG`, a little-endian `u32`
//! format version, a length-prefixed JSON header (configs, tensor
//! manifest, seed), then the raw weight buffers as little-endian 64-bit
//! floats in traversal order — filter-bank raw parameters first, then
//! every weight tensor in [`ModelWeights::for_each_tensor`] order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::BankConfig;
use crate::model::{model_init, ModelConfig, ModelWeights};
use crate::scalar::{cast, Scalar};
use crate::synth::SynthConfig;

pub const MAGIC: [u8; 4] = *b"GLOG";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    bank: BankConfig,
    seed: u64,
    synth: Option<SynthConfig>,
    tensors: Vec<TensorInfo>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

fn manifest<T: Scalar>(model: &ModelWeights<T>) -> Vec<TensorInfo> {
    let mut tensors = Vec::new();
    model.for_each_tensor(&mut |name, t| {
        tensors.push(TensorInfo {
            name,
            shape: t.shape().to_vec(),
        })
    });
    tensors
}

/// Write a checkpoint; `synth` is carried along so evaluation runs can
/// regenerate the dataset the model was trained for.
pub fn save<T: Scalar>(
    model: &ModelWeights<T>,
    synth: Option<&SynthConfig>,
    path: &Path,
) -> Result<()> {
    let header = Header {
        model: model.config.clone(),
        bank: model.bank_config,
        seed: model.seed,
        synth: synth.cloned(),
        tensors: manifest(model),
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut file = std::fs::File::create(path)?;
    file.write_all(&MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    file.write_all(&(header_json.len() as u32).to_le_bytes())?;
    file.write_all(&header_json)?;

    let mut write_buffer = |data: &[T]| -> Result<()> {
        let mut bytes = Vec::with_capacity(data.len() * 8);
        for &v in data {
            bytes.extend_from_slice(&v.to_f64().unwrap_or(f64::NAN).to_le_bytes());
        }
        file.write_all(&bytes)?;
        Ok(())
    };
    write_buffer(&model.bank.raw_params())?;
    let mut failure = None;
    model.for_each_tensor(&mut |_, t| {
        if failure.is_none() {
            if let Err(e) = write_buffer(t.data()) {
                failure = Some(e);
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Read a checkpoint back into a model (and the stored dataset config).
pub fn load<T: Scalar>(path: &Path) -> Result<(ModelWeights<T>, Option<SynthConfig>)> {
    let mut file = std::fs::File::open(path)?;

    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {VERSION}"
        )));
    }
    file.read_exact(&mut word)?;
    let header_len = u32::from_le_bytes(word) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)?;

    let mut model = model_init::<T>(header.model, header.bank, header.seed)?;
    let expected = manifest(&model);
    if expected != header.tensors {
        return Err(Error::Checkpoint(
            "tensor manifest does not match the architecture in the header".to_string(),
        ));
    }

    let read_buffer = |file: &mut std::fs::File, n: usize| -> Result<Vec<T>> {
        let mut bytes = vec![0u8; n * 8];
        file.read_exact(&mut bytes)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| cast::<T>(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect())
    };

    let bank_raw = read_buffer(&mut file, model.bank.learnable_param_count())?;
    model.bank.set_raw_params(&bank_raw)?;

    let mut failure = None;
    model.for_each_tensor_mut(&mut |_, t| {
        if failure.is_none() {
            match read_buffer(&mut file, t.numel()) {
                Ok(values) => t.data_mut().copy_from_slice(&values),
                Err(e) => failure = Some(e),
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }

    let mut trailing = Vec::new();
    file.read_to_end(&mut trailing)?;
    if !trailing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{} unexpected trailing bytes",
            trailing.len()
        )));
    }
    Ok((model, header.synth))
}
