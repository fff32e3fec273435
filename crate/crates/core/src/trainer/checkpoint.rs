//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, u32 version, u64 header length, JSON header, raw
//! little-endian tensor data, then the SHA-256 of everything before it.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Adam, MetricsRow, Sgd, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::networks::{Model, NetworkConfig, Networks, ParamEntry, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DSDRCKPT";
const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorIndex {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the data section.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    step: u64,
    train: TrainConfig,
    network: NetworkConfig,
    rng: RngState,
    adam_step: u64,
    adam_d_step: u64,
    running: [f64; 9],
    running_count: u64,
    history: Vec<MetricsRow>,
    last_report: Option<LossReport>,
    data_digest: String,
    components: Vec<crate::networks::Component>,
    tensors: Vec<TensorIndex>,
}

/// Human-readable summary written next to each checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub config: SidecarConfig,
    pub step: u64,
    pub last_report: Option<LossReport>,
    pub dataset_manifest_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarConfig {
    pub train: TrainConfig,
    pub network: NetworkConfig,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn tensors_of<T: Scalar>(state: &TrainState<T>) -> Vec<(String, &Tensor<T>)> {
    let entries = state.model.params.entries();
    let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
    for e in entries {
        out.push((format!("param/{}", e.name), &e.value));
    }
    for (tag, adam) in [("adam", &state.adam), ("adam_d", &state.adam_d)] {
        for (e, (m, v)) in entries.iter().zip(&adam.moments) {
            out.push((format!("{tag}.m/{}", e.name), m));
            out.push((format!("{tag}.v/{}", e.name), v));
        }
    }
    for (e, b) in entries.iter().zip(&state.sgd.buffers) {
        if let Some(b) = b {
            out.push((format!("sgd.buf/{}", e.name), b));
        }
    }
    out
}

/// Serialize `state` to bytes.
pub fn encode_checkpoint<T: Scalar>(state: &TrainState<T>) -> Result<Vec<u8>> {
    let tensors = tensors_of(state);
    let mut index = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in &tensors {
        index.push(TensorIndex {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
    }
    let header = Header {
        dtype: T::DTYPE.to_string(),
        step: state.step,
        train: state.config.clone(),
        network: state.model.networks.config().clone(),
        rng: RngState {
            seed: hex::encode(state.rng.get_seed()),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        adam_step: state.adam.step,
        adam_d_step: state.adam_d.step,
        running: state.running,
        running_count: state.running_count,
        history: state.history.clone(),
        last_report: state.last_report,
        data_digest: state.data_digest.clone(),
        components: state.model.params.entries().iter().map(|e| e.component).collect(),
        tensors: index,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::config(format!("checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(20 + json.len() + offset * T::BYTES + DIGEST_LEN);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &tensors {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Write the container and its JSON sidecar (`<path>.json`).
pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let sidecar = Sidecar {
        config: SidecarConfig {
            train: state.config.clone(),
            network: state.model.networks.config().clone(),
        },
        step: state.step,
        last_report: state.last_report,
        dataset_manifest_digest: state.data_digest.clone(),
    };
    let sp = sidecar_path(path);
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::config(e.to_string()))?;
    std::fs::write(&sp, text).map_err(|e| Error::io(&sp, e))
}

pub fn read_sidecar(checkpoint: &Path) -> Result<Sidecar> {
    let sp = sidecar_path(checkpoint);
    let text = std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: sp,
        message: e.to_string(),
    })
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<TrainState<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Parse and verify a container produced by [`encode_checkpoint`].
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], path: &Path) -> Result<TrainState<T>> {
    let fmt = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 20 + DIGEST_LEN {
        return Err(Error::Integrity {
            expected: "a container of at least 52 bytes".into(),
            found: format!("{} bytes", bytes.len()),
        });
    }
    let (body, stored) = bytes.split_at(bytes.len() - DIGEST_LEN);
    let found = hex::encode(Sha256::digest(body));
    let expected = hex::encode(stored);
    if found != expected {
        return Err(Error::Integrity { expected, found });
    }
    if &body[..8] != CHECKPOINT_MAGIC {
        return Err(fmt("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(fmt(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    let json = body.get(20..20 + hlen).ok_or_else(|| fmt("header overruns file".into()))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| fmt(format!("header: {e}")))?;
    if header.dtype != T::DTYPE {
        return Err(fmt(format!("checkpoint holds {} tensors, requested {}", header.dtype, T::DTYPE)));
    }
    let data = &body[20 + hlen..];
    let tensor = |name: &str| -> Result<Option<Tensor<T>>> {
        let Some(ix) = header.tensors.iter().find(|t| t.name == name) else {
            return Ok(None);
        };
        let n: usize = ix.shape.iter().product();
        let start = ix.offset * T::BYTES;
        let raw = data
            .get(start..start + n * T::BYTES)
            .ok_or_else(|| fmt(format!("tensor {name} overruns data section")))?;
        let vals = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        Tensor::from_vec(&ix.shape, vals).map(Some)
    };
    let networks = Networks::new(header.network.clone())?;
    let names: Vec<String> = networks.parameter_names().iter().map(|s| s.to_string()).collect();
    if names.len() != header.components.len() {
        return Err(fmt("parameter list does not match the network config".into()));
    }
    let need = |name: String| -> Result<Tensor<T>> { tensor(&name)?.ok_or_else(|| fmt(format!("missing tensor {name}"))) };
    let mut entries = Vec::with_capacity(names.len());
    let mut adam_m = Vec::new();
    let mut adam_d_m = Vec::new();
    let mut buffers = Vec::new();
    for (name, &component) in names.iter().zip(&header.components) {
        entries.push(ParamEntry {
            name: name.clone(),
            component,
            value: need(format!("param/{name}"))?,
        });
        adam_m.push((need(format!("adam.m/{name}"))?, need(format!("adam.v/{name}"))?));
        adam_d_m.push((need(format!("adam_d.m/{name}"))?, need(format!("adam_d.v/{name}"))?));
        buffers.push(tensor(&format!("sgd.buf/{name}"))?);
    }
    let model = Model::new(networks, ParamSet::from_entries(entries))?;
    let seed: [u8; 32] = hex::decode(&header.rng.seed)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| fmt("bad rng seed".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(header.rng.stream);
    rng.set_word_pos(
        header
            .rng
            .word_pos
            .parse()
            .map_err(|_| fmt("bad rng word position".into()))?,
    );
    Ok(TrainState {
        adam: Adam {
            config: header.train.adam,
            step: header.adam_step,
            moments: adam_m,
        },
        adam_d: Adam {
            config: header.train.adam,
            step: header.adam_d_step,
            moments: adam_d_m,
        },
        sgd: Sgd {
            config: header.train.sgd,
            buffers,
        },
        config: header.train,
        model,
        step: header.step,
        rng,
        running: header.running,
        running_count: header.running_count,
        history: header.history,
        last_report: header.last_report,
        data_digest: header.data_digest,
    })
}
