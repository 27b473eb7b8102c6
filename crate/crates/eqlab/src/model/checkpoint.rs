//! Binary checkpoint format: 8 magic bytes, a version integer, a text
//! config block, then named little-endian f32 blobs. Loads are all-or-
//! nothing: magic, version, config, blob names, and blob lengths must all
//! line up or the file is rejected.

use super::{DecoderConfig, DecoderParams, EncoderConfig, EncoderParams};
use crate::textkv::TextKv;
use std::io::{Read, Write};
use std::path::Path;
use tensorcore::Tensor;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"EQLABCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes; not a checkpoint file")]
    BadMagic,
    #[error("checkpoint version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint kind {found:?}, expected {expected:?}")]
    WrongKind { found: String, expected: String },
}

/// Provenance carried alongside the weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointMeta {
    pub train_step: u64,
    pub seed: u64,
    pub config_hash: String,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn block(&mut self, bytes: &[u8]) {
        self.u32(bytes.len() as u32);
        self.buf.extend_from_slice(bytes);
    }

    fn blob(&mut self, name: &str, t: &Tensor<f32>) {
        self.block(name.as_bytes());
        self.u64(t.numel() as u64);
        for &x in t.data() {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Malformed("file truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn block(&mut self) -> Result<&'a [u8], CheckpointError> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    let mut f = std::fs::File::create(path)
        .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    f.write_all(bytes)
        .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}

fn read_file(path: &Path) -> Result<Vec<u8>, CheckpointError> {
    let mut f = std::fs::File::open(path)
        .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)
        .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    Ok(buf)
}

fn save_common(
    path: &Path,
    header: TextKv,
    named: Vec<(String, &Tensor<f32>, bool)>,
) -> Result<(), CheckpointError> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.block(header.render().as_bytes());
    w.u32(named.len() as u32);
    for (name, t, _) in named {
        w.blob(&name, t);
    }
    write_file(path, &w.buf)
}

fn open_common<'a>(
    bytes: &'a [u8],
    expected_kind: &str,
) -> Result<(TextKv, CheckpointMeta, Reader<'a>), CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_text = std::str::from_utf8(r.block()?)
        .map_err(|_| CheckpointError::Malformed("header is not UTF-8".into()))?;
    let kv = TextKv::parse(header_text)
        .map_err(|e| CheckpointError::Malformed(format!("header: {e}")))?;
    let kind = kv
        .get("kind")
        .ok_or_else(|| CheckpointError::Malformed("header missing kind".into()))?;
    if kind != expected_kind {
        return Err(CheckpointError::WrongKind {
            found: kind.to_string(),
            expected: expected_kind.to_string(),
        });
    }
    let meta = CheckpointMeta {
        train_step: kv
            .parse_value("train_step", "u64")
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?,
        seed: kv
            .parse_value("seed", "u64")
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?,
        config_hash: kv.get("config_hash").unwrap_or_default().to_string(),
    };
    Ok((kv, meta, r))
}

fn load_blobs_into(
    mut r: Reader,
    mut named: Vec<(String, &mut Tensor<f32>, bool)>,
) -> Result<(), CheckpointError> {
    let count = r.u32()? as usize;
    if count != named.len() {
        return Err(CheckpointError::Malformed(format!(
            "checkpoint holds {count} blobs, model expects {}",
            named.len()
        )));
    }
    for (name, tensor, _) in named.iter_mut() {
        let blob_name = std::str::from_utf8(r.block()?)
            .map_err(|_| CheckpointError::Malformed("blob name is not UTF-8".into()))?;
        if blob_name != name {
            return Err(CheckpointError::Malformed(format!(
                "blob {blob_name:?} where {name:?} expected"
            )));
        }
        let numel = r.u64()? as usize;
        if numel != tensor.numel() {
            return Err(CheckpointError::Malformed(format!(
                "blob {name:?} holds {numel} values, config implies {}",
                tensor.numel()
            )));
        }
        let raw = r.take(numel * 4)?;
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            tensor.data_mut()[i] = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if r.pos != r.buf.len() {
        return Err(CheckpointError::Malformed("trailing bytes after blobs".into()));
    }
    Ok(())
}

pub fn save_encoder_checkpoint(
    path: &Path,
    params: &EncoderParams<f32>,
    meta: &CheckpointMeta,
) -> Result<(), CheckpointError> {
    let cfg = &params.cfg;
    let mut kv = TextKv::new();
    kv.push("kind", "encoder");
    kv.push("train_step", meta.train_step);
    kv.push("seed", meta.seed);
    kv.push("config_hash", &meta.config_hash);
    kv.push("layers", cfg.layers);
    kv.push("d_model", cfg.d_model);
    kv.push("heads", cfg.heads);
    kv.push("head_mlp_hidden", cfg.head_mlp_hidden);
    kv.push("max_len", cfg.max_len);
    kv.push("vocab_size", cfg.vocab_size);
    kv.push("dropout", cfg.dropout);
    save_common(path, kv, params.named())
}

pub fn load_encoder_checkpoint(
    path: &Path,
) -> Result<(EncoderParams<f32>, CheckpointMeta), CheckpointError> {
    let bytes = read_file(path)?;
    let (kv, meta, r) = open_common(&bytes, "encoder")?;
    let m = |e: crate::textkv::TextKvError| CheckpointError::Malformed(e.to_string());
    let cfg = EncoderConfig {
        layers: kv.parse_value("layers", "usize").map_err(m)?,
        d_model: kv.parse_value("d_model", "usize").map_err(m)?,
        heads: kv.parse_value("heads", "usize").map_err(m)?,
        head_mlp_hidden: kv.parse_value("head_mlp_hidden", "usize").map_err(m)?,
        max_len: kv.parse_value("max_len", "usize").map_err(m)?,
        vocab_size: kv.parse_value("vocab_size", "usize").map_err(m)?,
        dropout: kv.parse_value("dropout", "f64").map_err(m)?,
    };
    let mut params = EncoderParams::init(&cfg, 0);
    load_blobs_into(r, params.named_mut())?;
    Ok((params, meta))
}

pub fn save_decoder_checkpoint(
    path: &Path,
    params: &DecoderParams<f32>,
    meta: &CheckpointMeta,
) -> Result<(), CheckpointError> {
    let cfg = &params.cfg;
    let mut kv = TextKv::new();
    kv.push("kind", "decoder");
    kv.push("train_step", meta.train_step);
    kv.push("seed", meta.seed);
    kv.push("config_hash", &meta.config_hash);
    kv.push("layers", cfg.layers);
    kv.push("d_model", cfg.d_model);
    kv.push("heads", cfg.heads);
    kv.push("max_positions", cfg.max_positions);
    kv.push("context_len", cfg.context_len);
    kv.push("vocab_size", cfg.vocab_size);
    kv.push("dropout", cfg.dropout);
    save_common(path, kv, params.named())
}

pub fn load_decoder_checkpoint(
    path: &Path,
) -> Result<(DecoderParams<f32>, CheckpointMeta), CheckpointError> {
    let bytes = read_file(path)?;
    let (kv, meta, r) = open_common(&bytes, "decoder")?;
    let m = |e: crate::textkv::TextKvError| CheckpointError::Malformed(e.to_string());
    let cfg = DecoderConfig {
        layers: kv.parse_value("layers", "usize").map_err(m)?,
        d_model: kv.parse_value("d_model", "usize").map_err(m)?,
        heads: kv.parse_value("heads", "usize").map_err(m)?,
        max_positions: kv.parse_value("max_positions", "usize").map_err(m)?,
        context_len: kv.parse_value("context_len", "usize").map_err(m)?,
        vocab_size: kv.parse_value("vocab_size", "usize").map_err(m)?,
        dropout: kv.parse_value("dropout", "f64").map_err(m)?,
    };
    let mut params = DecoderParams::init(&cfg, 0);
    load_blobs_into(r, params.named_mut())?;
    Ok((params, meta))
}
