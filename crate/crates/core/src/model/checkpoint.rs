//! Base-model checkpoint: `PRAGBASE`, version, config block, then every
//! tensor in declared order as row-major little-endian fp32.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use super::{ModelConfig, ModelParams, ParamLayout, Params};

pub const MAGIC: &[u8; 8] = b"PRAGBASE";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 6 * 4;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: not a base-model checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    VersionUnsupported(u32),
    #[error("checkpoint truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("invalid config in checkpoint: {0}")]
    InvalidConfig(String),
}

pub fn to_bytes(model: &ModelParams) -> Vec<u8> {
    let cfg = model.config();
    let data = &model.params().data;
    let mut out = Vec::with_capacity(HEADER_LEN + data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for dim in [cfg.n_layers, cfg.hidden, cfg.ffn_intermediate, cfg.n_heads, cfg.vocab, cfg.max_seq_len] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams, CheckpointError> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(CheckpointError::Truncated { expected: HEADER_LEN, found: bytes.len() });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(8);
    if version != VERSION {
        return Err(CheckpointError::VersionUnsupported(version));
    }
    let dims: Vec<usize> = (0..6).map(|i| word(12 + 4 * i) as usize).collect();
    let config = ModelConfig { n_layers: dims[0], hidden: dims[1], ffn_intermediate: dims[2], n_heads: dims[3], vocab: dims[4], max_seq_len: dims[5] };
    config.validate().map_err(|e| CheckpointError::InvalidConfig(e.to_string()))?;
    let layout = ParamLayout::new(&config);
    let expected = HEADER_LEN + layout.total * 4;
    if bytes.len() != expected {
        return Err(CheckpointError::Truncated { expected, found: bytes.len() });
    }
    let data = bytes[HEADER_LEN..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok(ModelParams::new(Params { config, layout, data }))
}

/// Writes via a temporary file and rename.
pub fn save(model: &ModelParams, path: &Path) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&to_bytes(model))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelParams, CheckpointError> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_weights_and_fingerprint() {
        let m = ModelParams::init(ModelConfig::tiny(), 11).unwrap();
        let bytes = to_bytes(&m);
        assert_eq!(&bytes[..8], b"PRAGBASE");
        assert_eq!(bytes.len(), HEADER_LEN + ModelConfig::tiny().param_count() * 4);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.fingerprint(), m.fingerprint());
    }

    #[test]
    fn rejects_corrupt_headers() {
        let m = ModelParams::init(ModelConfig::tiny(), 1).unwrap();
        let mut bytes = to_bytes(&m);
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 1]), Err(CheckpointError::Truncated { .. })));
        bytes[8] = 9;
        assert!(matches!(from_bytes(&bytes), Err(CheckpointError::VersionUnsupported(9))));
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn save_and_load_through_the_filesystem() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.bin");
        let m = ModelParams::init(ModelConfig::tiny(), 2).unwrap();
        save(&m, &path).unwrap();
        assert_eq!(load(&path).unwrap(), m);
    }
}
