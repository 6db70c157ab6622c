//! Versioned single-file container for a [`TrainState`].
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "PCYCKPT\0" | version u32 | header length u64 | JSON header
//! | tensor payload | SHA-256 of everything before it
//! ```
//!
//! The payload holds, per network in [`TrainState::networks`] order, the
//! parameter tensors followed by the Adam first and second moments, each
//! tensor as raw elements in row-major order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Tensor;
use crate::training::TrainState;

pub const MAGIC: &[u8; 8] = b"PCYCKPT\0";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const PREAMBLE_LEN: usize = 8 + 4 + 8;

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_step{step:06}.bin")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal string; JSON numbers cannot hold a u128.
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkEntry {
    pub name: String,
    pub adam_t: u64,
    pub tensors: Vec<TensorEntry>,
}

impl NetworkEntry {
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum()
    }
}

/// Metadata stored ahead of the tensor payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub step: u64,
    pub config_hash: String,
    pub config: TrainConfig,
    pub rng: RngState,
    pub networks: Vec<NetworkEntry>,
}

impl CheckpointHeader {
    /// Network names with their tensor layouts, for structural comparison.
    pub fn layout(&self) -> Vec<(String, Vec<(String, Vec<usize>)>)> {
        self.networks
            .iter()
            .map(|n| (n.name.clone(), n.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect()))
            .collect()
    }
}

fn state_layout<T: Scalar>(state: &TrainState<T>) -> Vec<(String, Vec<(String, Vec<usize>)>)> {
    state.networks().into_iter().map(|(n, p)| (n, p.layout())).collect()
}

fn rng_state(rng: &ChaCha8Rng) -> RngState {
    RngState {
        seed: rng.get_seed(),
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos().to_string(),
    }
}

fn restore_rng(s: &RngState) -> Result<ChaCha8Rng> {
    let pos: u128 = s
        .word_pos
        .parse()
        .map_err(|_| Error::CheckpointCorrupt(format!("bad rng word position {:?}", s.word_pos)))?;
    let mut rng = ChaCha8Rng::from_seed(s.seed);
    rng.set_stream(s.stream);
    rng.set_word_pos(pos);
    Ok(rng)
}

/// Serializes `state` into the container format.
pub fn encode_checkpoint<T: Scalar>(state: &TrainState<T>) -> Result<Vec<u8>> {
    let mut networks = Vec::new();
    let mut payload = Vec::new();
    let opts = [&state.opt_g, &state.opt_f].into_iter().chain(&state.opt_d_y).chain(&state.opt_d_x);
    for ((name, params), opt) in state.networks().into_iter().zip(opts) {
        networks.push(NetworkEntry {
            name,
            adam_t: opt.t,
            tensors: params.iter().map(|(n, t)| TensorEntry { name: n.to_string(), shape: t.shape().to_vec() }).collect(),
        });
        for t in params.iter().map(|(_, t)| t).chain(&opt.m).chain(&opt.v) {
            for &v in t.iter() {
                v.write_le(&mut payload);
            }
        }
    }
    let header = CheckpointHeader {
        dtype: T::DTYPE.to_string(),
        step: state.step,
        config_hash: state.config_hash.clone(),
        config: state.config.clone(),
        rng: rng_state(&state.rng),
        networks,
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::CheckpointCorrupt(e.to_string()))?;

    let mut out = Vec::with_capacity(PREAMBLE_LEN + header.len() + payload.len() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Writes the checkpoint atomically: a sibling temp file is written,
/// synced and renamed over `path`.
pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::Io(e)
    })
}

/// Splits a container into its verified header and payload.
fn split(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < PREAMBLE_LEN + DIGEST_LEN || &bytes[..8] != MAGIC {
        return Err(Error::CheckpointCorrupt("missing header".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::CheckpointVersion(version));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::CheckpointCorrupt("checksum mismatch".into()));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header_bytes = body
        .get(PREAMBLE_LEN..PREAMBLE_LEN.saturating_add(hlen))
        .ok_or_else(|| Error::CheckpointCorrupt("header length exceeds file".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(header_bytes).map_err(|e| Error::CheckpointCorrupt(format!("header: {e}")))?;
    Ok((header, &body[PREAMBLE_LEN + hlen..]))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::CheckpointCorrupt(format!("{} not found", path.display())),
        _ => Error::Io(e),
    })
}

/// Reads and verifies only the metadata of a checkpoint.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    Ok(split(&read(path)?)?.0)
}

/// Rebuilds a state from container bytes. Nothing is returned unless the
/// whole file verifies.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<TrainState<T>> {
    let (header, payload) = split(bytes)?;
    if header.dtype != T::DTYPE {
        return Err(Error::Structure(format!("checkpoint holds {} tensors, {} requested", header.dtype, T::DTYPE)));
    }
    let mut state = TrainState::<T>::new(&header.config).map_err(|e| Error::CheckpointCorrupt(format!("embedded config: {e}")))?;
    if state_layout(&state) != header.layout() {
        return Err(Error::CheckpointCorrupt("tensor index does not match embedded config".into()));
    }
    let expected: usize = header.networks.iter().map(|n| 3 * n.numel() * T::BYTES).sum();
    if payload.len() != expected {
        return Err(Error::CheckpointCorrupt(format!("payload is {} bytes, expected {expected}", payload.len())));
    }

    let mut chunks = payload.chunks_exact(T::BYTES).map(T::read_le);
    let mut take = |shape: &[usize]| -> Tensor<T> {
        let n = shape.iter().product();
        ArrayD::from_shape_vec(IxDyn(shape), chunks.by_ref().take(n).collect()).expect("payload length checked")
    };
    for ((_, params, opt), entry) in state.networks_mut().into_iter().zip(&header.networks) {
        for t in params.tensors_mut() {
            *t = take(t.shape());
        }
        for m in opt.m.iter_mut().chain(opt.v.iter_mut()) {
            *m = take(m.shape());
        }
        opt.t = entry.adam_t;
    }
    state.step = header.step;
    state.rng = restore_rng(&header.rng)?;
    state.config_hash = header.config_hash;
    Ok(state)
}

/// Loads a checkpoint under the config it was written with.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<TrainState<T>> {
    decode_checkpoint(&read(path)?)
}

/// Loads a checkpoint to continue under `config`.
///
/// The network structure implied by `config` must match the checkpoint
/// exactly. A differing config hash is only warned about; the returned
/// flag is `true` when the hashes agree. The state carries `config`.
pub fn load_checkpoint_for<T: Scalar>(path: &Path, config: &TrainConfig) -> Result<(TrainState<T>, bool)> {
    let mut state = load_checkpoint::<T>(path)?;
    let fresh = TrainState::<T>::new(config)?;
    let (have, want) = (state_layout(&state), state_layout(&fresh));
    if have != want {
        let names = |l: &[(String, _)]| l.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>().join(",");
        let detail = if names(&have) != names(&want) {
            format!("checkpoint networks [{}] but config expects [{}]", names(&have), names(&want))
        } else {
            "checkpoint tensor shapes differ from the config's networks".to_string()
        };
        return Err(Error::Structure(detail));
    }
    let hash = config.hash();
    let matched = hash == state.config_hash;
    if !matched {
        log::warn!(
            "config hash {} differs from checkpoint's {}; continuing under the new config",
            &hash[..12],
            &state.config_hash[..state.config_hash.len().min(12)]
        );
    }
    state.config = config.clone();
    state.config_hash = hash;
    Ok((state, matched))
}
