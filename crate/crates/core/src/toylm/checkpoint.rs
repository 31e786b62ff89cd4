use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Scalar, ToyModel, ToyModelConfig, Vocab};

/// Eight-byte file signature.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FKCKPT01";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ToyModelConfig,
    vocab: Vocab,
    n_params: usize,
}

/// Layout: magic, little-endian `u32` header length, JSON header, then the
/// parameters as little-endian `f64`.
pub fn save_checkpoint<T: Scalar>(path: &Path, model: &ToyModel<T>, vocab: &Vocab) -> Result<(), CheckpointError> {
    let io_err = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    let header = Header { version: FORMAT_VERSION, config: model.config, vocab: vocab.clone(), n_params: model.n_params() };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(12 + json.len() + 8 * model.n_params());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in &model.params {
        buf.extend_from_slice(&p.to_f64().unwrap_or(f64::NAN).to_le_bytes());
    }
    fs::File::create(path).and_then(|mut f| f.write_all(&buf)).map_err(io_err)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ToyModel<T>, Vocab), CheckpointError> {
    let bad = |msg: String| CheckpointError::Format { path: path.to_path_buf(), msg };
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("four bytes")) as usize;
    let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(bad(format!("unsupported version {}", header.version)));
    }
    let raw = &bytes[12 + hlen..];
    if raw.len() != 8 * header.n_params {
        return Err(bad(format!("expected {} parameters, found {} bytes", header.n_params, raw.len())));
    }
    let params = raw
        .chunks_exact(8)
        .map(|b| T::from_f64(f64::from_le_bytes(b.try_into().expect("eight bytes"))).unwrap_or_else(T::nan))
        .collect();
    let model = ToyModel::with_params(header.config, params).map_err(|e| bad(e.to_string()))?;
    if header.vocab.len() != model.config.vocab_size {
        return Err(bad("vocabulary size does not match the model".into()));
    }
    Ok((model, header.vocab))
}
