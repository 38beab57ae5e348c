//! Binary checkpoint container.
//!
//! Layout: `GRDNETCK`, format version (u32 LE), header length (u64 LE), JSON
//! header, then every tensor listed in the header as raw little-endian values
//! in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use grdnet_tensor::{ParamSet, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Optimizers, TrainState};
use crate::error::{Error, Result};
use crate::networks::{NetworkBundle, NetworkConfig, NETWORK_NAMES};

const MAGIC: &[u8; 8] = b"GRDNETCK";
pub const FORMAT_VERSION: u32 = 1;

/// Digest of the architecture keys; checkpoints only load into a matching network.
pub fn config_hash(cfg: &NetworkConfig) -> String {
    let canonical = serde_json::to_string(cfg).expect("network config serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub set: String,
    /// Parameter name, or `adam.m.<i>` / `adam.v.<i>` for optimizer moments.
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub precision: String,
    pub config_hash: String,
    pub network: NetworkConfig,
    pub state: TrainState,
    /// Adam step counters per set; empty when no optimizer state was saved.
    pub optimizer_steps: Vec<u64>,
    pub beta1: f64,
    pub beta2: f64,
    pub tensors: Vec<TensorRecord>,
}

/// Everything restored from a checkpoint file.
#[derive(Clone, Debug)]
pub struct Checkpoint<T: Scalar> {
    pub header: Header,
    pub bundle: NetworkBundle<T>,
    pub optimizers: Option<Optimizers<T>>,
}

fn ck_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), reason: reason.into() }
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    bundle: &NetworkBundle<T>,
    optimizers: Option<&Optimizers<T>>,
    state: &TrainState,
) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload: Vec<&Tensor<T>> = Vec::new();
    for (name, set) in NETWORK_NAMES.iter().zip(bundle.param_sets()) {
        for e in set.entries() {
            tensors.push(TensorRecord { set: name.to_string(), name: e.name.clone(), shape: e.value.shape().to_vec() });
            payload.push(&e.value);
        }
    }
    let mut optimizer_steps = Vec::new();
    let (mut beta1, mut beta2) = (0.0, 0.0);
    if let Some(opts) = optimizers {
        for (name, adam) in NETWORK_NAMES.iter().zip(opts.all()) {
            optimizer_steps.push(adam.steps());
            let (m, v) = adam.moments();
            for (tag, moments) in [("m", m), ("v", v)] {
                for (i, t) in moments.iter().enumerate() {
                    tensors.push(TensorRecord { set: name.to_string(), name: format!("adam.{tag}.{i}"), shape: t.shape().to_vec() });
                    payload.push(t);
                }
            }
            (beta1, beta2) = (adam.beta1, adam.beta2);
        }
    }
    let header = Header {
        precision: T::NAME.to_string(),
        config_hash: config_hash(&bundle.config),
        network: bundle.config.clone(),
        state: state.clone(),
        optimizer_steps,
        beta1,
        beta2,
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| ck_err(path, format!("header encoding: {e}")))?;
    let mut bytes = Vec::with_capacity(json.len() + 20 + payload.iter().map(|t| t.len() * T::BYTES).sum::<usize>());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for t in payload {
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
    }
    // Write-then-rename so a crash never leaves a truncated checkpoint behind.
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn split_header(path: &Path, bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(ck_err(path, "not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(ck_err(path, format!("unsupported format version {version}, expected {FORMAT_VERSION}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let end = 20usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| ck_err(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..end]).map_err(|e| ck_err(path, format!("corrupt header: {e}")))?;
    Ok((header, end))
}

/// Reads only the header.
pub fn read_header(path: &Path) -> Result<Header> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split_header(path, &bytes)?.0)
}

/// Loads a checkpoint; when `expected` is given its architecture hash must match.
pub fn load_checkpoint<T: Scalar>(path: &Path, expected: Option<&NetworkConfig>) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, mut offset) = split_header(path, &bytes)?;
    if header.precision != T::NAME {
        return Err(ck_err(path, format!("checkpoint stores {} values, running precision is {}", header.precision, T::NAME)));
    }
    if config_hash(&header.network) != header.config_hash {
        return Err(ck_err(path, "header config hash does not match its own network section"));
    }
    if let Some(cfg) = expected {
        let running = config_hash(cfg);
        if running != header.config_hash {
            return Err(ck_err(
                path,
                format!(
                    "config hash mismatch: checkpoint {} vs running config {running}; the architecture keys differ",
                    header.config_hash
                ),
            ));
        }
    }
    let mut bundle = NetworkBundle::<T>::new(&header.network, 0)?;
    let mut records = header.tensors.iter();
    let mut next = |set: &str, name: &str, shape: &[usize]| -> Result<Tensor<T>> {
        let r = records.next().ok_or_else(|| ck_err(path, format!("missing tensor {set}/{name}")))?;
        if r.set != set || r.name != name || r.shape != shape {
            return Err(ck_err(path, format!("expected tensor {set}/{name} {shape:?}, found {}/{} {:?}", r.set, r.name, r.shape)));
        }
        let n: usize = shape.iter().product();
        let end = offset + n * T::BYTES;
        if end > bytes.len() {
            return Err(ck_err(path, format!("truncated data at tensor {set}/{name}")));
        }
        let data = bytes[offset..end].chunks_exact(T::BYTES).map(T::read_le).collect();
        offset = end;
        Ok(Tensor::from_vec(shape, data))
    };
    for (name, set) in NETWORK_NAMES.iter().zip(bundle.param_sets_mut()) {
        for e in set.entries_mut() {
            e.value = next(name, &e.name, e.value.shape())?;
        }
    }
    let optimizers = if header.optimizer_steps.is_empty() {
        None
    } else {
        if header.optimizer_steps.len() != NETWORK_NAMES.len() {
            return Err(ck_err(path, "optimizer state for an unexpected number of networks"));
        }
        let mut opts = Optimizers::new(&bundle, header.beta1, header.beta2);
        for ((name, adam), (set, &steps)) in
            NETWORK_NAMES.iter().zip(opts.all_mut()).zip(bundle.param_sets().into_iter().zip(&header.optimizer_steps))
        {
            let mut restore = |tag: &str| -> Result<Vec<Tensor<T>>> {
                set.entries().iter().enumerate().map(|(i, e)| next(name, &format!("adam.{tag}.{i}"), e.value.shape())).collect()
            };
            let m = restore("m")?;
            let v = restore("v")?;
            adam.restore(steps, m, v);
        }
        Some(opts)
    };
    if records.next().is_some() || offset != bytes.len() {
        return Err(ck_err(path, "trailing data after the last tensor"));
    }
    if !bundle.all_finite() {
        return Err(ck_err(path, "non-finite parameter values"));
    }
    Ok(Checkpoint { header, bundle, optimizers })
}

/// True when two sets hold bitwise-identical values under the same names.
pub fn sets_equal<T: Scalar>(a: &ParamSet<T>, b: &ParamSet<T>) -> bool {
    a.layout() == b.layout() && a.same_values(b)
}
