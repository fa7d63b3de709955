//! Versioned binary checkpoints of the full training state.
//!
//! Layout (little-endian): 8-byte magic, `u32` version, `u64` config hash,
//! `u64` metadata length and JSON metadata, `u64` tensor count, then per
//! tensor a `u32`-prefixed name, a dtype byte (0 = f32, 1 = f64), a `u32`
//! rank, `u64` dims and raw data. A SHA-256 digest of everything before it
//! closes the file.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::text::Vocabulary;
use crate::train::TrainState;

pub const MAGIC: &[u8; 8] = b"TXPDCKPT";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    config: TrainConfig,
    vocab: Vec<String>,
    step: u64,
    pretrain_step: u64,
    /// Update counters of the pre-training, discriminator and generator
    /// optimizers.
    optimizer_steps: [u64; 3],
}

const OPTIMIZERS: [&str; 3] = ["pretrain", "disc", "gen"];

fn optimizers(state: &TrainState) -> [&Adam; 3] {
    [&state.opt_pretrain, &state.opt_disc, &state.opt_gen]
}

fn write_entry(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.push(match t.dtype() {
        DType::F32 => 0,
        DType::F64 => 1,
        other => return Err(Error::Checkpoint(format!("cannot store dtype {other:?}"))),
    });
    let dims = t.dims();
    out.extend((dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend((*d as u64).to_le_bytes());
    }
    let flat = t.flatten_all()?;
    match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().for_each(|v| out.extend(v.to_le_bytes())),
        _ => flat.to_vec1::<f64>()?.iter().for_each(|v| out.extend(v.to_le_bytes())),
    }
    Ok(())
}

/// Serializes `state` to bytes.
pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let meta = Metadata {
        config: state.config.clone(),
        vocab: state.model.vocab.to_lines(),
        step: state.step,
        pretrain_step: state.pretrain_step,
        optimizer_steps: optimizers(state).map(Adam::steps),
    };
    let mut entries: Vec<(String, Tensor)> = state
        .model
        .store
        .iter()
        .map(|(n, v)| (format!("param/{n}"), v.as_tensor().clone()))
        .collect();
    for (tag, opt) in OPTIMIZERS.iter().zip(optimizers(state)) {
        for (n, m, v) in opt.moments() {
            entries.push((format!("adam.{tag}.m/{n}"), m.clone()));
            entries.push((format!("adam.{tag}.v/{n}"), v.clone()));
        }
    }
    let meta = serde_json::to_vec(&meta)?;
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend(state.config.hash().to_le_bytes());
    out.extend((meta.len() as u64).to_le_bytes());
    out.extend(&meta);
    out.extend((entries.len() as u64).to_le_bytes());
    for (name, t) in &entries {
        write_entry(&mut out, name, t)?;
    }
    let digest = Sha256::digest(&out);
    out.extend(digest);
    Ok(out)
}

/// Writes atomically: a sibling temporary file is renamed into place.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::Checkpoint("unexpected end of data".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, bound: usize) -> Result<usize> {
        let n = self.u64()?;
        if n > bound as u64 {
            return Err(Error::Checkpoint(format!("length {n} exceeds the file size")));
        }
        Ok(n as usize)
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name_len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = self.take(1)?[0];
        let rank = self.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(self.len(self.data.len())?);
        }
        let count: usize = dims.iter().product();
        let t = match dtype {
            0 => {
                let raw = self.take(count.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
                let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
                Tensor::from_vec(v, dims, &Device::Cpu)?
            }
            1 => {
                let raw = self.take(count.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
                let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
                Tensor::from_vec(v, dims, &Device::Cpu)?
            }
            other => return Err(Error::Checkpoint(format!("unknown dtype tag {other} for `{name}`"))),
        };
        Ok((name, t))
    }
}

/// Reads only the header's config hash.
pub fn checkpoint_config_hash(bytes: &[u8]) -> Result<u64> {
    let mut r = Reader { data: bytes, pos: 0 };
    read_header(&mut r)
}

fn read_header(r: &mut Reader<'_>) -> Result<u64> {
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {version} is not supported (expected {VERSION})"
        )));
    }
    r.u64()
}

/// Rebuilds a training state from bytes. With `expected`, the stored config
/// hash must equal `expected.hash()`.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&TrainConfig>) -> Result<TrainState> {
    if bytes.len() < MAGIC.len() + DIGEST_LEN {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    let mut r = Reader { data: body, pos: 0 };
    let hash = read_header(&mut r)?;
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch (truncated or corrupt file)".into()));
    }
    if let Some(cfg) = expected {
        if cfg.hash() != hash {
            return Err(Error::Checkpoint(format!(
                "config hash {:016x} does not match checkpoint {hash:016x}",
                cfg.hash()
            )));
        }
    }
    let meta_len = r.len(body.len())?;
    let meta: Metadata = serde_json::from_slice(r.take(meta_len)?)?;
    if meta.config.hash() != hash {
        return Err(Error::Checkpoint("embedded config disagrees with header hash".into()));
    }
    let count = r.len(body.len())?;
    let mut params = BTreeMap::new();
    let mut moments: [BTreeMap<String, (Option<Tensor>, Option<Tensor>)>; 3] = Default::default();
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        if let Some(p) = name.strip_prefix("param/") {
            params.insert(p.to_string(), t);
            continue;
        }
        let (kind, pname) = name
            .split_once('/')
            .ok_or_else(|| Error::Checkpoint(format!("unexpected entry `{name}`")))?;
        let mut parts = kind.split('.');
        let (Some("adam"), Some(tag), Some(which), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Checkpoint(format!("unexpected entry `{name}`")));
        };
        let i = OPTIMIZERS
            .iter()
            .position(|o| *o == tag)
            .ok_or_else(|| Error::Checkpoint(format!("unknown optimizer `{tag}`")))?;
        let slot = moments[i].entry(pname.to_string()).or_default();
        match which {
            "m" => slot.0 = Some(t),
            "v" => slot.1 = Some(t),
            _ => return Err(Error::Checkpoint(format!("unexpected entry `{name}`"))),
        }
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
    }

    let vocab = Vocabulary::from_tokens(meta.vocab).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut state = TrainState::new(meta.config, vocab)?;
    let expected_names: Vec<&String> = state.model.store.iter().map(|(n, _)| n).collect();
    if expected_names.len() != params.len() || expected_names.iter().any(|n| !params.contains_key(*n)) {
        return Err(Error::Checkpoint("parameter set differs from the configured model".into()));
    }
    for (name, t) in &params {
        state
            .model
            .store
            .assign(name, t)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    let dtype = state.model.store.dtype();
    let opts = [&mut state.opt_pretrain, &mut state.opt_disc, &mut state.opt_gen];
    for ((opt, found), steps) in opts.into_iter().zip(moments).zip(meta.optimizer_steps) {
        let mut restored = BTreeMap::new();
        for (name, slot) in found {
            match slot {
                (Some(m), Some(v)) => {
                    restored.insert(name, (m.to_dtype(dtype)?, v.to_dtype(dtype)?));
                }
                _ => return Err(Error::Checkpoint(format!("incomplete moments for `{name}`"))),
            }
        }
        opt.restore(steps, restored);
    }
    state.step = meta.step;
    state.pretrain_step = meta.pretrain_step;
    Ok(state)
}

pub fn load_checkpoint(path: &Path, expected: Option<&TrainConfig>) -> Result<TrainState> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes, expected)
}
