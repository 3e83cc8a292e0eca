//! Binary checkpoints.
//!
//! ```text
//! magic "SREIDCKP" | u32 version | u64 header length | JSON header
//! | little-endian f64 payload | sha256 of everything before it
//! ```
//!
//! The payload holds every parameter in store order, then the Adam moments of
//! trainable parameters, the lookup table and the queued features.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ReidError, Result};
use crate::losses::OimState;
use crate::params::ParamKind;
use crate::pipeline::config::Config;
use crate::pipeline::model::Model;
use crate::pipeline::optim::Adam;
use crate::pipeline::train::Trainer;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SREIDCKP";
pub const CHECKPOINT_VERSION: u32 = 2;

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: Config,
    seed: u64,
    epoch: usize,
    adam_step: usize,
    rng_stream: u64,
    rng_word_pos: u128,
    params: Vec<ParamMeta>,
    identities: usize,
    dim: usize,
    populated: Vec<bool>,
    queue_len: usize,
}

pub fn checkpoint_bytes(t: &Trainer) -> Result<Vec<u8>> {
    let store = &t.model.store;
    let header = Header {
        config: t.model.config.clone(),
        seed: t.seed,
        epoch: t.epoch,
        adam_step: t.adam.step,
        rng_stream: t.rng_position().0,
        rng_word_pos: t.rng_position().1,
        params: store
            .iter()
            .map(|(_, p)| ParamMeta {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.kind == ParamKind::Trainable,
            })
            .collect(),
        identities: t.oim.identities(),
        dim: t.oim.dim(),
        populated: (0..t.oim.identities()).map(|i| t.oim.is_populated(i)).collect(),
        queue_len: t.oim.queue_len(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let mut put = |xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
    for (_, p) in store.iter() {
        put(p.value.data());
    }
    for (id, p) in store.iter() {
        if p.kind == ParamKind::Trainable {
            put(t.adam.m[id.index()].data());
            put(t.adam.v[id.index()].data());
        }
    }
    put(t.oim.lut().data());
    for row in t.oim.queue() {
        put(row);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn checkpoint_save(t: &Trainer, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(t)?)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(ReidError::Checkpoint("truncated payload".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Parses and verifies a checkpoint. With `expected`, refuses any other config.
pub fn checkpoint_from_bytes(bytes: &[u8], expected: Option<&Config>) -> Result<Trainer> {
    if bytes.len() < MAGIC.len() + 12 + 32 || &bytes[..8] != MAGIC {
        return Err(ReidError::Checkpoint("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(ReidError::Checkpoint("checksum mismatch; file is corrupted".into()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(ReidError::Checkpoint(format!(
            "version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    let mut r = Reader { buf: body, pos: 20 };
    let header: Header = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| ReidError::Checkpoint(format!("bad header: {e}")))?;
    if let Some(cfg) = expected {
        if *cfg != header.config {
            return Err(ReidError::Checkpoint("config differs from the one the checkpoint was trained with".into()));
        }
    }
    let mut model = Model::new(&header.config, header.seed)?;
    if model.store.len() != header.params.len() {
        return Err(ReidError::Checkpoint(format!(
            "{} parameters stored, model has {}",
            header.params.len(),
            model.store.len()
        )));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for (id, meta) in ids.iter().zip(&header.params) {
        let p = model.store.param(*id);
        if p.name != meta.name || p.value.shape() != meta.shape.as_slice() || (p.kind == ParamKind::Trainable) != meta.trainable {
            return Err(ReidError::Checkpoint(format!(
                "parameter {} {:?} does not match stored {} {:?}",
                p.name,
                p.value.shape(),
                meta.name,
                meta.shape
            )));
        }
    }
    for (id, meta) in ids.iter().zip(&header.params) {
        let v = Tensor::new(&meta.shape, r.floats(meta.shape.iter().product())?)?;
        model.store.set(*id, v)?;
    }
    let t = &header.config.train;
    let mut adam = Adam::new(&model.store, t.beta1, t.beta2, t.weight_decay);
    adam.step = header.adam_step;
    for (id, meta) in ids.iter().zip(&header.params) {
        if meta.trainable {
            let n = meta.shape.iter().product();
            adam.m[id.index()] = Tensor::new(&meta.shape, r.floats(n)?)?;
            adam.v[id.index()] = Tensor::new(&meta.shape, r.floats(n)?)?;
        }
    }
    if header.dim != model.net.dim() || header.populated.len() != header.identities {
        return Err(ReidError::Checkpoint("lookup table shape does not match the model".into()));
    }
    let lut = Tensor::new(&[header.identities, header.dim], r.floats(header.identities * header.dim)?)?;
    let queue = (0..header.queue_len).map(|_| r.floats(header.dim)).collect::<Result<Vec<_>>>()?;
    if r.pos != body.len() {
        return Err(ReidError::Checkpoint("trailing bytes after payload".into()));
    }
    let oim = OimState::from_parts(header.config.oim(), lut, header.populated, queue)
        .map_err(|e| ReidError::Checkpoint(e.to_string()))?;
    Ok(Trainer::from_parts(
        model,
        oim,
        adam,
        header.seed,
        header.epoch,
        (header.rng_stream, header.rng_word_pos),
    ))
}

pub fn checkpoint_load(path: &Path, expected: Option<&Config>) -> Result<Trainer> {
    checkpoint_from_bytes(&fs::read(path)?, expected)
}
