//! Versioned JSON checkpoints bound to a vocabulary fingerprint.
//!
//! Loading rejects a checkpoint whose fingerprint disagrees with the
//! vocabulary in use; a model is meaningless under a different token
//! mapping. JSON keeps the files diffable and the f64 round-trip exact.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CkptError {
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed checkpoint {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    Version { found: u32 },
    #[error("vocabulary fingerprint mismatch: checkpoint {found}, current {expected}")]
    VocabMismatch { found: String, expected: String },
}

#[derive(Debug, Serialize, Deserialize)]
struct Envelope<T> {
    version: u32,
    vocab_fingerprint: String,
    params: T,
}

pub fn save_checkpoint<T: Serialize>(
    path: &Path,
    vocab_fingerprint: &str,
    params: &T,
) -> Result<(), CkptError> {
    let env = Envelope {
        version: CHECKPOINT_VERSION,
        vocab_fingerprint: vocab_fingerprint.to_string(),
        params,
    };
    let body = serde_json::to_string(&env).expect("checkpoint serialization cannot fail");
    fs::write(path, body).map_err(|source| CkptError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint<T: DeserializeOwned>(
    path: &Path,
    vocab_fingerprint: &str,
) -> Result<T, CkptError> {
    let body = fs::read_to_string(path).map_err(|source| CkptError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let env: Envelope<T> = serde_json::from_str(&body).map_err(|source| CkptError::Parse {
        path: path.display().to_string(),
        source,
    })?;
    if env.version != CHECKPOINT_VERSION {
        return Err(CkptError::Version { found: env.version });
    }
    if env.vocab_fingerprint != vocab_fingerprint {
        return Err(CkptError::VocabMismatch {
            found: env.vocab_fingerprint,
            expected: vocab_fingerprint.to_string(),
        });
    }
    Ok(env.params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderPair;

    #[test]
    fn round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        let pair = EncoderPair::init(10, 4, 3);
        save_checkpoint(&path, "fp123", &pair).unwrap();
        let back: EncoderPair = load_checkpoint(&path, "fp123").unwrap();
        assert_eq!(pair, back);
    }

    #[test]
    fn fingerprint_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        let pair = EncoderPair::init(10, 4, 3);
        save_checkpoint(&path, "fp123", &pair).unwrap();
        let err = load_checkpoint::<EncoderPair>(&path, "other").unwrap_err();
        assert!(matches!(err, CkptError::VocabMismatch { .. }));
    }

    #[test]
    fn bad_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        std::fs::write(&path, r#"{"version":9,"vocab_fingerprint":"f","params":null}"#).unwrap();
        let err = load_checkpoint::<Option<u32>>(&path, "f").unwrap_err();
        assert!(matches!(err, CkptError::Version { found: 9 }));
    }
}
